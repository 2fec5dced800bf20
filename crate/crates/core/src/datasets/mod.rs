//! Dataset layout on disk, manifest IO, stimulus-level splits and the
//! synthetic generator.

pub mod synth;
pub mod tensor_io;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flat;
use crate::preprocess::{
    format_atlas_table, load_roi_scheme, pack_batch, pack_surface, read_atlas_table, z_transform, AtlasTable, RawRun,
    SchemeId, StdConvention, SurfaceLayout, DEFAULT_ZSCORE_EPS,
};
use crate::rng::{rng_for, Stream};
pub use synth::{generate, SynthData, TargetSet};
pub use tensor_io::{read_tensor, write_tensor, TensorData};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PROCESSED_FILE: &str = "processed.txt";

/// Shapes and generative parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    /// Number of distinct stimuli; every subject sees each one once.
    pub n_samples: usize,
    pub voxels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub frames: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub clip_tokens: usize,
    pub clip_channels: usize,
    pub clip_layers: usize,
    pub clip_low_layer: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub seg_size: usize,
    pub semantic_dim: usize,
    pub subject_dim: usize,
    pub noise_sigma: f64,
    /// Spread of the per-subject orthogonal mixing around the identity.
    pub subject_rotation: f64,
    /// Scale of the constant per-subject signature `h_s`.
    pub subject_offset: f64,
    pub tr_seconds: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 3,
            n_samples: 512,
            voxels: 64,
            grid_rows: 32,
            grid_cols: 32,
            frames: 8,
            image_size: 16,
            n_classes: 8,
            vocab_size: 16,
            caption_len: 4,
            clip_tokens: 4,
            clip_channels: 16,
            clip_layers: 8,
            clip_low_layer: 2,
            latent_channels: 4,
            latent_size: 4,
            seg_size: 8,
            semantic_dim: 8,
            subject_dim: 4,
            noise_sigma: 0.1,
            subject_rotation: 0.3,
            subject_offset: 0.5,
            tr_seconds: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: String,
    pub synth: SynthSpec,
    pub atlas: String,
    pub layout: String,
    /// Role name to tensor file, relative to the manifest directory.
    pub files: BTreeMap<String, String>,
    pub preprocess_order: String,
    /// Restricts the dataset to these stimulus ids (set by `split`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimuli: Option<Vec<u32>>,
    /// ROI scheme applied by preprocessing, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
}

const TENSOR_ROLES: [&str; 13] = [
    "voxels",
    "subject_ids",
    "stimulus_ids",
    "subject_factors",
    "clip_low",
    "clip_high",
    "video_embed",
    "captions",
    "labels",
    "seg_masks",
    "blurry_latents",
    "frames",
    "z_sem",
];

impl DatasetManifest {
    pub fn to_text(&self) -> Result<String> {
        flat::to_text(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = flat::from_text(text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(m.format_version));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// Stimulus ids covered by this manifest, ascending.
    pub fn stimulus_ids(&self) -> Vec<u32> {
        match &self.stimuli {
            Some(s) => s.clone(),
            None => (0..self.synth.n_samples as u32).collect(),
        }
    }

    /// Every listed file exists under `root`.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        let mut paths = vec![&self.atlas, &self.layout];
        paths.extend(self.files.values());
        for p in paths {
            let full = root.join(p);
            if !full.is_file() {
                return Err(Error::io(
                    full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed file missing"),
                ));
            }
        }
        Ok(())
    }
}

fn arr_err(role: &str, e: impl std::fmt::Display) -> Error {
    Error::shape(format!("{role}: {e}"))
}

fn save(dir: &Path, files: &mut BTreeMap<String, String>, role: &str, t: TensorData) -> Result<()> {
    let name = format!("{role}.vcft");
    write_tensor(&dir.join(&name), &t)?;
    files.insert(role.to_string(), name);
    Ok(())
}

/// Generate a synthetic dataset into `dir` and return its manifest.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    let data = generate(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let t = &data.targets;
    save(dir, &mut files, "voxels", data.voxels.clone().into_dyn().into())?;
    save(dir, &mut files, "subject_ids", data.subject_ids.clone().into_dyn().into())?;
    save(dir, &mut files, "stimulus_ids", data.stimulus_ids.clone().into_dyn().into())?;
    save(dir, &mut files, "subject_factors", data.subject_factors.clone().into_dyn().into())?;
    save(dir, &mut files, "clip_low", t.clip_low.clone().into_dyn().into())?;
    save(dir, &mut files, "clip_high", t.clip_high.clone().into_dyn().into())?;
    save(dir, &mut files, "video_embed", t.video_embed.clone().into_dyn().into())?;
    save(dir, &mut files, "captions", t.captions.clone().into_dyn().into())?;
    save(dir, &mut files, "labels", t.labels.clone().into_dyn().into())?;
    save(dir, &mut files, "seg_masks", t.seg_masks.clone().into_dyn().into())?;
    save(dir, &mut files, "blurry_latents", t.blurry_latents.clone().into())?;
    save(dir, &mut files, "frames", t.frames.clone().into_dyn().into())?;
    save(dir, &mut files, "z_sem", t.z_sem.clone().into_dyn().into())?;

    let atlas_path = dir.join("atlas.txt");
    fs::write(&atlas_path, format_atlas_table(&data.atlas)).map_err(|e| Error::io(&atlas_path, e))?;
    let layout = SurfaceLayout::spread(spec.voxels, spec.grid_rows, spec.grid_cols)?;
    let layout_path = dir.join("layout.txt");
    fs::write(&layout_path, layout.to_text()).map_err(|e| Error::io(&layout_path, e))?;

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        kind: "synthetic".into(),
        synth: spec.clone(),
        atlas: "atlas.txt".into(),
        layout: "layout.txt".into(),
        files,
        preprocess_order: "zscore_per_run,hemodynamic_shift,average_runs".into(),
        stimuli: None,
        scheme: None,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Standardize every voxel over all records (pooled across subjects, so
/// subject-level shifts survive), check the ROI scheme against the atlas,
/// pack the surface images and write a processed manifest next to the raw
/// one.
pub fn preprocess_dataset(raw_manifest: &Path, scheme: SchemeId) -> Result<DatasetManifest> {
    let ds = Dataset::load(raw_manifest)?;
    load_roi_scheme(scheme, &ds.atlas)?;
    let run = RawRun {
        volumes: ds.voxels.clone(),
        tr_seconds: ds.spec().tr_seconds,
        subject_id: 0,
    };
    let voxels = z_transform(&run, DEFAULT_ZSCORE_EPS, StdConvention::Population).volumes;
    let surfaces = pack_batch(&voxels.clone().insert_axis(Axis(0)), &ds.layout)?.index_axis_move(Axis(0), 0);

    let dir = &ds.root;
    let mut m = ds.manifest.clone();
    let std_name = "voxels_std.vcft";
    write_tensor(&dir.join(std_name), &voxels.into_dyn().into())?;
    m.files.insert("voxels".into(), std_name.into());
    save(dir, &mut m.files, "surfaces", surfaces.into_dyn().into())?;
    m.preprocess_order = format!("{},standardize_pooled,pack_surface", m.preprocess_order);
    m.scheme = Some(scheme.to_string());
    m.write(&dir.join(PROCESSED_FILE))?;
    Ok(m)
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub atlas: AtlasTable,
    pub layout: SurfaceLayout,
    /// `[n_records, V]`
    pub voxels: Array2<f64>,
    pub subject_ids: Vec<usize>,
    pub stimulus_ids: Vec<usize>,
    pub subject_factors: Array2<f64>,
    pub targets: TargetSet,
    /// Packed surface images `[n_records, H, W]`, present after preprocessing.
    pub surfaces: Option<Array3<f64>>,
    index: BTreeMap<(usize, usize), usize>,
}

fn load_f64<D: ndarray::Dimension>(root: &Path, m: &DatasetManifest, role: &str) -> Result<ndarray::Array<f64, D>> {
    let rel = m
        .files
        .get(role)
        .ok_or_else(|| Error::Pipeline(format!("manifest lists no `{role}` file")))?;
    read_tensor(&root.join(rel))?
        .into_f64()?
        .into_dimensionality::<D>()
        .map_err(|e| arr_err(role, e))
}

fn load_i32(root: &Path, m: &DatasetManifest, role: &str) -> Result<ArrayD<i32>> {
    let rel = m
        .files
        .get(role)
        .ok_or_else(|| Error::Pipeline(format!("manifest lists no `{role}` file")))?;
    read_tensor(&root.join(rel))?.into_i32()
}

impl Dataset {
    /// Load the dataset described by the manifest at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_manifest(&root, manifest)
    }

    pub fn from_manifest(root: &Path, manifest: DatasetManifest) -> Result<Self> {
        manifest.check_files(root)?;
        for role in TENSOR_ROLES {
            if !manifest.files.contains_key(role) {
                return Err(Error::Pipeline(format!("manifest lists no `{role}` file")));
            }
        }
        let spec = &manifest.synth;
        let atlas = read_atlas_table(&root.join(&manifest.atlas))?;
        let layout_path = root.join(&manifest.layout);
        let layout_text = fs::read_to_string(&layout_path).map_err(|e| Error::io(&layout_path, e))?;
        let layout = SurfaceLayout::parse(&layout_text, spec.grid_rows, spec.grid_cols)?;

        let voxels: Array2<f64> = load_f64(root, &manifest, "voxels")?;
        let to_usize = |a: ArrayD<i32>| -> Vec<usize> { a.iter().map(|&x| x.max(0) as usize).collect() };
        let subject_ids = to_usize(load_i32(root, &manifest, "subject_ids")?);
        let stimulus_ids = to_usize(load_i32(root, &manifest, "stimulus_ids")?);
        if subject_ids.len() != voxels.nrows() || stimulus_ids.len() != voxels.nrows() {
            return Err(Error::shape("record id tensors disagree with voxel rows"));
        }
        let labels = load_i32(root, &manifest, "labels")?
            .into_dimensionality::<Ix1>()
            .map_err(|e| arr_err("labels", e))?;
        let captions = load_i32(root, &manifest, "captions")?
            .into_dimensionality::<Ix2>()
            .map_err(|e| arr_err("captions", e))?;
        let seg_rel = &manifest.files["seg_masks"];
        let seg_masks = read_tensor(&root.join(seg_rel))?
            .into_u8()?
            .into_dimensionality::<Ix3>()
            .map_err(|e| arr_err("seg_masks", e))?;
        let targets = TargetSet {
            clip_low: load_f64::<Ix3>(root, &manifest, "clip_low")?,
            clip_high: load_f64::<Ix3>(root, &manifest, "clip_high")?,
            video_embed: load_f64::<Ix3>(root, &manifest, "video_embed")?,
            captions,
            labels,
            seg_masks,
            blurry_latents: load_f64::<ndarray::IxDyn>(root, &manifest, "blurry_latents")?,
            frames: load_f64::<Ix4>(root, &manifest, "frames")?,
            z_sem: load_f64::<Ix2>(root, &manifest, "z_sem")?,
        };
        let surfaces = match manifest.files.get("surfaces") {
            Some(_) => Some(load_f64::<Ix3>(root, &manifest, "surfaces")?),
            None => None,
        };
        let subject_factors = load_f64::<Ix2>(root, &manifest, "subject_factors")?;
        let index = subject_ids
            .iter()
            .zip(&stimulus_ids)
            .enumerate()
            .map(|(r, (&s, &j))| ((j, s), r))
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            atlas,
            layout,
            voxels,
            subject_ids,
            stimulus_ids,
            subject_factors,
            targets,
            surfaces,
            index,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.manifest.synth
    }

    /// Stimulus ids in this (possibly split) dataset.
    pub fn stimuli(&self) -> Vec<usize> {
        self.manifest.stimulus_ids().into_iter().map(|s| s as usize).collect()
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut s = self.subject_ids.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn record(&self, stimulus: usize, subject: usize) -> Result<usize> {
        self.index.get(&(stimulus, subject)).copied().ok_or_else(|| {
            Error::Pipeline(format!("no recording of stimulus {stimulus} by subject {subject}"))
        })
    }

    /// Voxels `[B, S, V]` for every (stimulus, subject) pair.
    pub fn voxel_batch(&self, stimuli: &[usize], subjects: &[usize]) -> Result<Array3<f64>> {
        let v = self.voxels.ncols();
        let mut out = Array3::zeros((stimuli.len(), subjects.len(), v));
        for (b, &j) in stimuli.iter().enumerate() {
            for (k, &s) in subjects.iter().enumerate() {
                let r = self.record(j, s)?;
                out.slice_mut(ndarray::s![b, k, ..]).assign(&self.voxels.row(r));
            }
        }
        Ok(out)
    }

    /// Surface images `[B, S, H, W]`, packed on the fly if not preprocessed.
    pub fn surface_batch(&self, stimuli: &[usize], subjects: &[usize]) -> Result<Array4<f64>> {
        let (h, w) = (self.layout.rows(), self.layout.cols());
        let mut out = Array4::zeros((stimuli.len(), subjects.len(), h, w));
        for (b, &j) in stimuli.iter().enumerate() {
            for (k, &s) in subjects.iter().enumerate() {
                let r = self.record(j, s)?;
                let img = match &self.surfaces {
                    Some(surf) => surf.index_axis(Axis(0), r).to_owned(),
                    None => pack_surface(self.voxels.row(r), &self.layout)?,
                };
                out.slice_mut(ndarray::s![b, k, .., ..]).assign(&img);
            }
        }
        Ok(out)
    }

    /// Gather per-stimulus rows of a target array.
    pub fn gather<A: Clone, D: ndarray::RemoveAxis>(
        arr: &ndarray::Array<A, D>,
        stimuli: &[usize],
    ) -> ndarray::Array<A, D> {
        arr.select(Axis(0), stimuli)
    }

    pub fn labels_of(&self, stimuli: &[usize]) -> Array1<i32> {
        Self::gather(&self.targets.labels, stimuli)
    }
}

/// Split stimulus ids by `ratios` (nonnegative, summing to 1). Group
/// boundaries are `round(n * cumulative ratio)`, so each part is within one
/// stimulus of its exact share. All recordings of a stimulus share a part.
pub fn split(manifest: &DatasetManifest, ratios: &[f64], seed: u64) -> Result<Vec<DatasetManifest>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(ratios.to_vec()));
    }
    let mut ids = manifest.stimulus_ids();
    ids.shuffle(&mut rng_for(seed, Stream::Split, 0));
    let n = ids.len();
    let mut parts = Vec::with_capacity(ratios.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        let end = if k + 1 == ratios.len() {
            n
        } else {
            ((n as f64 * cum).round() as usize).min(n)
        };
        let mut part: Vec<u32> = ids[start..end.max(start)].to_vec();
        part.sort_unstable();
        start = end.max(start);
        parts.push(DatasetManifest {
            stimuli: Some(part),
            ..manifest.clone()
        });
    }
    Ok(parts)
}

/// Convenience two-way split.
pub fn split_train_test(
    manifest: &DatasetManifest,
    train_ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let mut parts = split(manifest, &[train_ratio, 1.0 - train_ratio], seed)?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, test))
}

/// Write an 8-bit binary PGM of an image with values in [0, 1].
pub fn write_pgm(path: &Path, image: &Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            kind: "synthetic".into(),
            synth: SynthSpec {
                n_samples: n,
                ..SynthSpec::default()
            },
            atlas: "atlas.txt".into(),
            layout: "layout.txt".into(),
            files: BTreeMap::new(),
            preprocess_order: String::new(),
            stimuli: None,
            scheme: None,
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let mut m = manifest(10);
        m.files.insert("voxels".into(), "voxels.vcft".into());
        m.stimuli = Some(vec![1, 4, 7]);
        let back = DatasetManifest::parse(&m.to_text().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_version_checked() {
        let mut m = manifest(3);
        m.format_version = 99;
        let err = DatasetManifest::parse(&m.to_text().unwrap()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion(99)));
    }

    #[test]
    fn all_train_when_ratio_is_one() {
        let (train, test) = split_train_test(&manifest(20), 1.0, 3).unwrap();
        assert_eq!(train.stimulus_ids().len(), 20);
        assert!(test.stimulus_ids().is_empty());
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(matches!(split(&manifest(5), &[0.5, 0.4], 0), Err(Error::BadRatios(_))));
        assert!(matches!(split(&manifest(5), &[1.5, -0.5], 0), Err(Error::BadRatios(_))));
    }

    #[test]
    fn split_sizes_within_one() {
        for n in [1usize, 7, 10, 33, 512] {
            for r in [0.1, 0.25, 0.8, 0.9] {
                let (train, test) = split_train_test(&manifest(n), r, 11).unwrap();
                let nt = train.stimulus_ids().len() as f64;
                assert!((nt - n as f64 * r).abs() <= 1.0, "n={n} r={r} got {nt}");
                assert_eq!(train.stimulus_ids().len() + test.stimulus_ids().len(), n);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn split_is_disjoint_and_exhaustive(seed in any::<u64>(), n in 1usize..200, r in 0.0f64..=1.0) {
            let (train, test) = split_train_test(&manifest(n), r, seed).unwrap();
            let a: BTreeSet<u32> = train.stimulus_ids().into_iter().collect();
            let b: BTreeSet<u32> = test.stimulus_ids().into_iter().collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.len() + b.len(), n);
            let again = split_train_test(&manifest(n), r, seed).unwrap();
            prop_assert_eq!(again.0.stimulus_ids(), train.stimulus_ids());
        }
    }

    #[test]
    fn synthetic_dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_samples: 12,
            ..SynthSpec::default()
        };
        write_synthetic(dir.path(), &spec).unwrap();
        let ds = Dataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        let direct = generate(&spec).unwrap();
        assert_eq!(ds.voxels, direct.voxels);
        assert_eq!(ds.targets, direct.targets);
        assert_eq!(ds.subjects(), vec![0, 1, 2]);
        let x = ds.voxel_batch(&[3, 5], &[2, 0]).unwrap();
        assert_eq!(x.slice(ndarray::s![1, 0, ..]), direct.voxels.row(5 * 3 + 2));
        let img = ds.surface_batch(&[3], &[1]).unwrap();
        assert_eq!(img.shape(), [1, 1, 32, 32]);
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_samples: 6,
            ..SynthSpec::default()
        };
        let m = write_synthetic(a.path(), &spec).unwrap();
        write_synthetic(b.path(), &spec).unwrap();
        let mut names: Vec<String> = m.files.values().cloned().collect();
        names.extend([MANIFEST_FILE.to_string(), "atlas.txt".into(), "layout.txt".into()]);
        for name in names {
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn missing_file_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_samples: 4,
            ..SynthSpec::default()
        };
        write_synthetic(dir.path(), &spec).unwrap();
        fs::remove_file(dir.path().join("labels.vcft")).unwrap();
        assert!(matches!(
            Dataset::load(&dir.path().join(MANIFEST_FILE)),
            Err(Error::IoFailure { .. })
        ));
    }
}
