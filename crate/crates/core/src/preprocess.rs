//! fMRI preprocessing: ROI schemes and voxel partitioning, voxel-wise
//! z-scoring, hemodynamic delay compensation, run averaging, and packing of
//! the flattened vertex vector onto a 2-D surface grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the visual hierarchy a voxel group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoiGroup {
    Early,
    Ventral,
    Dorsal,
}

impl RoiGroup {
    pub const ALL: [RoiGroup; 3] = [RoiGroup::Early, RoiGroup::Ventral, RoiGroup::Dorsal];

    pub fn name(self) -> &'static str {
        match self {
            RoiGroup::Early => "early",
            RoiGroup::Ventral => "ventral",
            RoiGroup::Dorsal => "dorsal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    A,
    B,
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(SchemeId::A),
            "B" | "b" => Ok(SchemeId::B),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeId::A => f.write_str("A"),
            SchemeId::B => f.write_str("B"),
        }
    }
}

const EARLY: &[&str] = &["V1", "V2", "V3", "V4"];

const SCHEME_A_DORSAL: &[&str] = &[
    "V3A", "V3B", "V6", "V6A", "V7", "IPS1", "LO1", "LO2", "LO3", "FST", "MT", "MST", "V3CD",
    "V4t", "PH", "IP0",
];
const SCHEME_A_VENTRAL: &[&str] = &[
    "FFC", "PIT", "V8", "VMV1", "VMV2", "VMV3", "VVC", "PHA1", "PHA2", "PHA3", "TE2p",
];

const SCHEME_B_DORSAL: &[&str] = &[
    "V3A", "V3B", "V6", "V6A", "V7", "IPS1", "FST", "MT", "MST", "V3CD", "V4t", "IP0",
];
const SCHEME_B_VENTRAL: &[&str] = &[
    "FFC", "PIT", "V8", "VMV1", "VMV2", "VMV3", "VVC", "PHA1", "PHA2", "PHA3", "TE2p", "LO1",
    "LO2", "LO3", "PH",
];

/// Region labels of a scheme, grouped, in their listed order.
pub fn scheme_labels(id: SchemeId) -> [(RoiGroup, &'static [&'static str]); 3] {
    match id {
        SchemeId::A => [
            (RoiGroup::Early, EARLY),
            (RoiGroup::Ventral, SCHEME_A_VENTRAL),
            (RoiGroup::Dorsal, SCHEME_A_DORSAL),
        ],
        SchemeId::B => [
            (RoiGroup::Early, EARLY),
            (RoiGroup::Ventral, SCHEME_B_VENTRAL),
            (RoiGroup::Dorsal, SCHEME_B_DORSAL),
        ],
    }
}

/// Region label -> voxel indices, as read from an atlas table.
pub type AtlasTable = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiScheme {
    pub scheme_id: SchemeId,
    pub early_labels: Vec<String>,
    pub ventral_labels: Vec<String>,
    pub dorsal_labels: Vec<String>,
    pub index_map: BTreeMap<String, Vec<usize>>,
}

impl RoiScheme {
    pub fn labels(&self, group: RoiGroup) -> &[String] {
        match group {
            RoiGroup::Early => &self.early_labels,
            RoiGroup::Ventral => &self.ventral_labels,
            RoiGroup::Dorsal => &self.dorsal_labels,
        }
    }

    /// Concatenated voxel indices of a group, in label order then index order.
    pub fn group_indices(&self, group: RoiGroup) -> Vec<usize> {
        self.labels(group)
            .iter()
            .flat_map(|l| self.index_map[l].iter().copied())
            .collect()
    }

    pub fn group_len(&self, group: RoiGroup) -> usize {
        self.labels(group).iter().map(|l| self.index_map[l].len()).sum()
    }

    /// Largest index referenced plus one.
    pub fn min_voxel_count(&self) -> usize {
        self.index_map
            .values()
            .flat_map(|v| v.iter())
            .map(|&i| i + 1)
            .max()
            .unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        let mut owner: HashMap<usize, &str> = HashMap::new();
        let mut seen_label: HashMap<&str, RoiGroup> = HashMap::new();
        for group in RoiGroup::ALL {
            for label in self.labels(group) {
                if let Some(prev) = seen_label.insert(label, group) {
                    return Err(Error::InvalidParameter(format!(
                        "label {label} listed in both {} and {}",
                        prev.name(),
                        group.name()
                    )));
                }
                let indices = self
                    .index_map
                    .get(label)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::MissingLabel(label.clone()))?;
                for &i in indices {
                    if let Some(first) = owner.insert(i, label) {
                        return Err(Error::OverlappingIndices {
                            index: i,
                            first: first.to_string(),
                            second: label.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Build scheme `id` from an atlas table, checking disjointness and coverage.
pub fn load_roi_scheme(id: SchemeId, atlas: &AtlasTable) -> Result<RoiScheme> {
    let mut index_map = BTreeMap::new();
    let mut lists: BTreeMap<RoiGroup, Vec<String>> = BTreeMap::new();
    for (group, labels) in scheme_labels(id) {
        for &label in labels {
            let indices = atlas
                .get(label)
                .ok_or_else(|| Error::MissingLabel(label.to_string()))?;
            index_map.insert(label.to_string(), indices.clone());
        }
        lists.insert(group, labels.iter().map(|s| s.to_string()).collect());
    }
    let scheme = RoiScheme {
        scheme_id: id,
        early_labels: lists.remove(&RoiGroup::Early).unwrap(),
        ventral_labels: lists.remove(&RoiGroup::Ventral).unwrap(),
        dorsal_labels: lists.remove(&RoiGroup::Dorsal).unwrap(),
        index_map,
    };
    scheme.validate()?;
    Ok(scheme)
}

/// Every label used by either scheme, early first, then scheme A's dorsal
/// and ventral order.
pub fn atlas_label_order() -> Vec<&'static str> {
    EARLY
        .iter()
        .chain(SCHEME_A_DORSAL)
        .chain(SCHEME_A_VENTRAL)
        .copied()
        .collect()
}

/// Small synthetic atlas: `n_voxels` split into contiguous runs over the
/// labels of [`atlas_label_order`], earlier labels taking the remainder.
pub fn synthetic_atlas(n_voxels: usize) -> Result<AtlasTable> {
    let labels = atlas_label_order();
    if n_voxels < labels.len() {
        return Err(Error::InvalidParameter(format!(
            "synthetic atlas needs at least {} voxels, got {n_voxels}",
            labels.len()
        )));
    }
    let base = n_voxels / labels.len();
    let extra = n_voxels % labels.len();
    let mut table = AtlasTable::new();
    let mut next = 0;
    for (i, label) in labels.iter().enumerate() {
        let len = base + usize::from(i < extra);
        table.insert(label.to_string(), (next..next + len).collect());
        next += len;
    }
    Ok(table)
}

/// Parse `LABEL idx idx ...` lines; `#` starts a comment.
pub fn parse_atlas_table(text: &str) -> Result<AtlasTable> {
    let mut table = AtlasTable::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let label = fields.next().unwrap().to_string();
        let indices = fields
            .map(|f| {
                f.parse::<usize>().map_err(|_| {
                    Error::Config(format!("atlas line {}: bad index `{f}`", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if table.insert(label.clone(), indices).is_some() {
            return Err(Error::Config(format!(
                "atlas line {}: region {label} listed twice",
                lineno + 1
            )));
        }
    }
    Ok(table)
}

pub fn format_atlas_table(table: &AtlasTable) -> String {
    let mut out = String::from("# region voxel-indices (0-based)\n");
    for label in atlas_label_order()
        .into_iter()
        .filter(|l| table.contains_key(*l))
        .map(str::to_string)
        .chain(
            table
                .keys()
                .filter(|k| !atlas_label_order().contains(&k.as_str()))
                .cloned(),
        )
    {
        out.push_str(&label);
        for i in &table[&label] {
            out.push(' ');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_atlas_table(path: &Path) -> Result<AtlasTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_atlas_table(&text)
}

/// Output of [`partition_voxels`], each `[batch, subject, V_group]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedVoxels {
    pub early: Array3<f64>,
    pub ventral: Array3<f64>,
    pub dorsal: Array3<f64>,
}

impl PartitionedVoxels {
    pub fn group(&self, g: RoiGroup) -> &Array3<f64> {
        match g {
            RoiGroup::Early => &self.early,
            RoiGroup::Ventral => &self.ventral,
            RoiGroup::Dorsal => &self.dorsal,
        }
    }
}

/// Gather each group's voxel columns out of `x[batch, subject, V]`.
pub fn partition_voxels(x: &Array3<f64>, scheme: &RoiScheme) -> Result<PartitionedVoxels> {
    let v = x.shape()[2];
    let gather = |g: RoiGroup| -> Result<Array3<f64>> {
        let idx = scheme.group_indices(g);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::IndexOutOfRange { index: bad, len: v });
        }
        Ok(x.select(Axis(2), &idx))
    };
    Ok(PartitionedVoxels {
        early: gather(RoiGroup::Early)?,
        ventral: gather(RoiGroup::Ventral)?,
        dorsal: gather(RoiGroup::Dorsal)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StdConvention {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

/// One scanner run: `volumes[time, vertex]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRun {
    pub volumes: Array2<f64>,
    pub tr_seconds: f64,
    pub subject_id: u32,
}

impl RawRun {
    pub fn time_len(&self) -> usize {
        self.volumes.nrows()
    }

    pub fn vertex_count(&self) -> usize {
        self.volumes.ncols()
    }
}

pub const DEFAULT_ZSCORE_EPS: f64 = 1e-8;

/// Per-vertex `(x - mean_t) / max(std_t, eps)`.
pub fn z_transform(run: &RawRun, eps: f64, convention: StdConvention) -> RawRun {
    let t = run.time_len();
    let mean = run.volumes.mean_axis(Axis(0)).expect("time >= 1");
    let centered = &run.volumes - &mean.view().insert_axis(Axis(0));
    let denom = match convention {
        StdConvention::Population => t as f64,
        StdConvention::Sample => (t.max(2) - 1) as f64,
    };
    let std = centered
        .map_axis(Axis(0), |col| (col.iter().map(|x| x * x).sum::<f64>() / denom).sqrt())
        .mapv(|s| s.max(eps));
    RawRun {
        volumes: centered / std.view().insert_axis(Axis(0)),
        tr_seconds: run.tr_seconds,
        subject_id: run.subject_id,
    }
}

/// Number of whole frames in `delay_seconds`.
pub fn shift_frames(delay_seconds: f64, tr_seconds: f64) -> Result<usize> {
    if delay_seconds < 0.0 || tr_seconds <= 0.0 {
        return Err(Error::NonIntegerShift {
            delay_seconds,
            tr_seconds,
        });
    }
    let ratio = delay_seconds / tr_seconds;
    let frames = ratio.round();
    if (ratio - frames).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::NonIntegerShift {
            delay_seconds,
            tr_seconds,
        });
    }
    Ok(frames as usize)
}

/// Output frame `t` is input frame `t + delay / tr`; trailing frames are dropped.
pub fn hemodynamic_shift(run: &RawRun, delay_seconds: f64) -> Result<RawRun> {
    let shift = shift_frames(delay_seconds, run.tr_seconds)?;
    let len = run.time_len();
    if shift >= len {
        return Err(Error::ShiftExceedsRun { shift, len });
    }
    Ok(RawRun {
        volumes: run.volumes.slice(ndarray::s![shift.., ..]).to_owned(),
        tr_seconds: run.tr_seconds,
        subject_id: run.subject_id,
    })
}

/// Element-wise mean of runs sharing shape, TR and subject.
pub fn average_runs(runs: &[RawRun]) -> Result<RawRun> {
    let first = runs.first().ok_or(Error::EmptyList("runs to average"))?;
    let mut acc = Array2::<f64>::zeros(first.volumes.raw_dim());
    for (i, run) in runs.iter().enumerate() {
        if run.volumes.shape() != first.volumes.shape() {
            return Err(Error::shape(format!(
                "run {i} has shape {:?}, expected {:?}",
                run.volumes.shape(),
                first.volumes.shape()
            )));
        }
        if run.subject_id != first.subject_id || run.tr_seconds != first.tr_seconds {
            return Err(Error::shape(format!(
                "run {i} differs in subject or TR from run 0"
            )));
        }
        acc += &run.volumes;
    }
    Ok(RawRun {
        volumes: acc / runs.len() as f64,
        tr_seconds: first.tr_seconds,
        subject_id: first.subject_id,
    })
}

/// Injective map from voxel index to a cell of an `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceLayout {
    rows: usize,
    cols: usize,
    cells: Vec<(usize, usize)>,
}

impl SurfaceLayout {
    pub fn new(cells: Vec<(usize, usize)>, rows: usize, cols: usize) -> Result<Self> {
        let mut taken = vec![false; rows * cols];
        for &(row, col) in &cells {
            if row >= rows || col >= cols {
                return Err(Error::TargetOutOfGrid {
                    row,
                    col,
                    rows,
                    cols,
                });
            }
            let slot = &mut taken[row * cols + col];
            if *slot {
                return Err(Error::DuplicateTarget { row, col });
            }
            *slot = true;
        }
        Ok(Self { rows, cols, cells })
    }

    /// Voxels spread evenly in raster order: voxel `i` lands on flat cell
    /// `floor(i * rows * cols / n_voxels)`.
    pub fn spread(n_voxels: usize, rows: usize, cols: usize) -> Result<Self> {
        let cells_total = rows * cols;
        if n_voxels > cells_total {
            return Err(Error::InvalidParameter(format!(
                "{n_voxels} voxels do not fit a {rows}x{cols} grid"
            )));
        }
        let cells = (0..n_voxels)
            .map(|i| {
                let flat = i * cells_total / n_voxels;
                (flat / cols, flat % cols)
            })
            .collect();
        Self::new(cells, rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_voxels(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    /// One `row col` pair per line, in voxel order.
    pub fn to_text(&self) -> String {
        let mut out = format!("# surface layout {} {}\n", self.rows, self.cols);
        for (r, c) in &self.cells {
            out.push_str(&format!("{r} {c}\n"));
        }
        out
    }

    pub fn parse(text: &str, rows: usize, cols: usize) -> Result<Self> {
        let mut cells = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parsed: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("layout line {}: `{line}`", lineno + 1)))?;
            if parsed.len() != 2 {
                return Err(Error::Config(format!(
                    "layout line {}: expected `row col`",
                    lineno + 1
                )));
            }
            cells.push((parsed[0], parsed[1]));
        }
        Self::new(cells, rows, cols)
    }
}

/// Scatter a voxel vector onto the grid; unassigned cells stay zero.
pub fn pack_surface(voxels: ArrayView1<'_, f64>, layout: &SurfaceLayout) -> Result<Array2<f64>> {
    if voxels.len() != layout.n_voxels() {
        return Err(Error::shape(format!(
            "{} voxels for a {}-voxel layout",
            voxels.len(),
            layout.n_voxels()
        )));
    }
    let mut image = Array2::zeros((layout.rows, layout.cols));
    for (&v, &(r, c)) in voxels.iter().zip(&layout.cells) {
        image[[r, c]] = v;
    }
    Ok(image)
}

/// Inverse of [`pack_surface`] on the packed cells.
pub fn unpack_surface(image: ArrayView2<'_, f64>, layout: &SurfaceLayout) -> Result<Array1<f64>> {
    if image.dim() != (layout.rows, layout.cols) {
        return Err(Error::shape(format!(
            "image {:?} vs layout {}x{}",
            image.dim(),
            layout.rows,
            layout.cols
        )));
    }
    Ok(layout.cells.iter().map(|&(r, c)| image[[r, c]]).collect())
}

/// Pack `x[batch, subject, V]` into `[batch, subject, rows, cols]`.
pub fn pack_batch(x: &Array3<f64>, layout: &SurfaceLayout) -> Result<Array4<f64>> {
    let (b, s, v) = x.dim();
    if v != layout.n_voxels() {
        return Err(Error::shape(format!("{v} voxels for a {}-voxel layout", layout.n_voxels())));
    }
    let mut out = Array4::zeros((b, s, layout.rows, layout.cols));
    for bi in 0..b {
        for si in 0..s {
            for (vi, &(r, c)) in layout.cells.iter().enumerate() {
                out[[bi, si, r, c]] = x[[bi, si, vi]];
            }
        }
    }
    Ok(out)
}

/// One preprocessed record: voxel vector plus its surface image.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriSurfaceSample {
    pub voxels: Array1<f64>,
    pub surface_image: Array2<f64>,
    pub subject_id: u32,
    pub stimulus_id: u32,
}

impl FmriSurfaceSample {
    pub fn new(
        voxels: Array1<f64>,
        layout: &SurfaceLayout,
        subject_id: u32,
        stimulus_id: u32,
    ) -> Result<Self> {
        let surface_image = pack_surface(voxels.view(), layout)?;
        Ok(Self {
            voxels,
            surface_image,
            subject_id,
            stimulus_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_for, Stream};
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn run(volumes: Array2<f64>) -> RawRun {
        RawRun {
            volumes,
            tr_seconds: 2.0,
            subject_id: 1,
        }
    }

    fn random_run(t: usize, v: usize, seed: u64) -> RawRun {
        let mut rng = rng_for(seed, Stream::Synth, 0);
        run(randn(&[t, v], &mut rng).into_dimensionality().unwrap())
    }

    #[test]
    fn scheme_a_label_sets() {
        let atlas = synthetic_atlas(64).unwrap();
        let s = load_roi_scheme(SchemeId::A, &atlas).unwrap();
        assert_eq!(s.early_labels, ["V1", "V2", "V3", "V4"]);
        for l in ["FFC", "PHA1", "PHA2", "PHA3"] {
            assert!(s.ventral_labels.iter().any(|x| x == l));
        }
        for l in ["MT", "MST"] {
            assert!(s.dorsal_labels.iter().any(|x| x == l));
        }
    }

    #[test]
    fn scheme_b_moves_lateral_occipital_to_ventral() {
        let atlas = synthetic_atlas(64).unwrap();
        let s = load_roi_scheme(SchemeId::B, &atlas).unwrap();
        for l in ["LO1", "LO2", "LO3", "PH"] {
            assert!(s.ventral_labels.iter().any(|x| x == l));
            assert!(!s.dorsal_labels.iter().any(|x| x == l));
        }
    }

    #[test]
    fn unknown_scheme_rejected() {
        assert!(matches!("C".parse::<SchemeId>(), Err(Error::UnknownScheme(_))));
    }

    #[test]
    fn missing_and_overlapping_regions_rejected() {
        let mut atlas = synthetic_atlas(64).unwrap();
        atlas.remove("MT");
        assert!(matches!(
            load_roi_scheme(SchemeId::A, &atlas),
            Err(Error::MissingLabel(l)) if l == "MT"
        ));
        let mut atlas = synthetic_atlas(64).unwrap();
        let v1 = atlas["V1"][0];
        atlas.get_mut("MT").unwrap().push(v1);
        assert!(matches!(
            load_roi_scheme(SchemeId::A, &atlas),
            Err(Error::OverlappingIndices { .. })
        ));
        let mut atlas = synthetic_atlas(64).unwrap();
        atlas.insert("FFC".into(), vec![]);
        assert!(matches!(load_roi_scheme(SchemeId::A, &atlas), Err(Error::MissingLabel(_))));
    }

    #[test]
    fn synthetic_atlas_covers_every_voxel_once() {
        let atlas = synthetic_atlas(64).unwrap();
        let mut all: Vec<usize> = atlas.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        let s = load_roi_scheme(SchemeId::A, &atlas).unwrap();
        assert_eq!(
            RoiGroup::ALL.iter().map(|g| s.group_len(*g)).sum::<usize>(),
            64
        );
    }

    #[test]
    fn atlas_text_round_trips() {
        let atlas = synthetic_atlas(40).unwrap();
        let text = format_atlas_table(&atlas);
        assert_eq!(parse_atlas_table(&text).unwrap(), atlas);
        let with_comment = "# header\nV1 0 1 # trailing\n\nV2 2\n";
        let parsed = parse_atlas_table(with_comment).unwrap();
        assert_eq!(parsed["V1"], vec![0, 1]);
        assert_eq!(parsed["V2"], vec![2]);
    }

    fn tiny_scheme(early: Vec<usize>, ventral: Vec<usize>, dorsal: Vec<usize>) -> RoiScheme {
        let mut index_map = BTreeMap::new();
        index_map.insert("E".to_string(), early);
        index_map.insert("VT".to_string(), ventral);
        index_map.insert("D".to_string(), dorsal);
        RoiScheme {
            scheme_id: SchemeId::A,
            early_labels: vec!["E".into()],
            ventral_labels: vec!["VT".into()],
            dorsal_labels: vec!["D".into()],
            index_map,
        }
    }

    #[test]
    fn partition_gathers_listed_columns() {
        let x = Array::from_shape_vec((1, 1, 6), vec![10., 11., 12., 13., 14., 15.]).unwrap();
        let scheme = tiny_scheme(vec![1, 3], vec![0, 5], vec![2, 4]);
        let p = partition_voxels(&x, &scheme).unwrap();
        assert_eq!(p.early.as_slice().unwrap(), &[11., 13.]);
        assert_eq!(p.ventral.as_slice().unwrap(), &[10., 15.]);
        assert_eq!(p.dorsal.as_slice().unwrap(), &[12., 14.]);
    }

    #[test]
    fn partition_of_full_cover_is_a_permutation() {
        let mut rng = rng_for(3, Stream::Synth, 0);
        let x: Array3<f64> = randn(&[2, 3, 6], &mut rng).into_dimensionality().unwrap();
        let scheme = tiny_scheme(vec![4, 1], vec![0, 5], vec![3, 2]);
        let p = partition_voxels(&x, &scheme).unwrap();
        let cat = ndarray::concatenate(Axis(2), &[p.early.view(), p.ventral.view(), p.dorsal.view()])
            .unwrap();
        let mut got: Vec<f64> = cat.iter().copied().collect();
        let mut want: Vec<f64> = x.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
    }

    #[test]
    fn partition_matches_elementwise_copy_loop() {
        let atlas = synthetic_atlas(64).unwrap();
        let scheme = load_roi_scheme(SchemeId::A, &atlas).unwrap();
        let mut rng = rng_for(4, Stream::Synth, 0);
        let x: Array3<f64> = randn(&[3, 2, 64], &mut rng).into_dimensionality().unwrap();
        let p = partition_voxels(&x, &scheme).unwrap();
        for g in RoiGroup::ALL {
            // oracle: walk labels, copy element by element
            let mut expected = Vec::new();
            for b in 0..3 {
                for s in 0..2 {
                    for label in scheme.labels(g) {
                        for &i in &atlas[label] {
                            expected.push(x[[b, s, i]]);
                        }
                    }
                }
            }
            assert_eq!(p.group(g).iter().copied().collect::<Vec<_>>(), expected);
        }
    }

    #[test]
    fn partition_outputs_are_independent_copies() {
        let x = Array::from_shape_vec((1, 1, 3), vec![1., 2., 3.]).unwrap();
        let scheme = tiny_scheme(vec![0], vec![1], vec![2]);
        let mut p = partition_voxels(&x, &scheme).unwrap();
        p.early[[0, 0, 0]] = 99.0;
        assert_eq!(x[[0, 0, 0]], 1.0);
        assert_eq!(p.ventral[[0, 0, 0]], 2.0);
    }

    #[test]
    fn partition_rejects_out_of_range() {
        let x = Array3::<f64>::zeros((1, 1, 3));
        let scheme = tiny_scheme(vec![0], vec![1], vec![7]);
        assert!(matches!(
            partition_voxels(&x, &scheme),
            Err(Error::IndexOutOfRange { index: 7, len: 3 })
        ));
    }

    #[test]
    fn zscore_constant_series_is_zero() {
        let r = run(Array2::from_elem((5, 3), 4.2));
        let z = z_transform(&r, DEFAULT_ZSCORE_EPS, StdConvention::Population);
        assert!(z.volumes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_two_point_series() {
        let r = run(array![[0.0, 0.0], [2.0, 2.0]]);
        let z = z_transform(&r, DEFAULT_ZSCORE_EPS, StdConvention::Population);
        assert_eq!(z.volumes, array![[-1.0, -1.0], [1.0, 1.0]]);
    }

    #[test]
    fn zscore_matches_scalar_loop() {
        let r = random_run(10, 5, 5);
        let z = z_transform(&r, DEFAULT_ZSCORE_EPS, StdConvention::Population);
        for v in 0..5 {
            let col: Vec<f64> = (0..10).map(|t| r.volumes[[t, v]]).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 10.0;
            for t in 0..10 {
                let expected = (col[t] - mean) / var.sqrt().max(DEFAULT_ZSCORE_EPS);
                assert!((z.volumes[[t, v]] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_convention_divides_by_n_minus_one() {
        let r = run(array![[0.0], [2.0]]);
        let z = z_transform(&r, DEFAULT_ZSCORE_EPS, StdConvention::Sample);
        let s = 2f64.sqrt();
        assert!((z.volumes[[0, 0]] + 1.0 / s).abs() < 1e-12);
    }

    #[test]
    fn six_second_delay_at_two_second_tr_is_three_frames() {
        assert_eq!(shift_frames(6.0, 2.0).unwrap(), 3);
        let r = random_run(10, 4, 6);
        let shifted = hemodynamic_shift(&r, 6.0).unwrap();
        assert_eq!(shifted.time_len(), 7);
        assert_eq!(shifted.volumes.row(0), r.volumes.row(3));
        assert_eq!(hemodynamic_shift(&r, 0.0).unwrap(), r);
    }

    #[test]
    fn shift_errors() {
        let r = random_run(3, 2, 7);
        assert!(matches!(hemodynamic_shift(&r, 5.0), Err(Error::NonIntegerShift { .. })));
        assert!(matches!(
            hemodynamic_shift(&r, 6.0),
            Err(Error::ShiftExceedsRun { shift: 3, len: 3 })
        ));
    }

    #[test]
    fn averaging() {
        let a = run(Array2::from_elem((2, 3), 1.0));
        let b = run(Array2::from_elem((2, 3), 3.0));
        assert_eq!(average_runs(&[a.clone(), a.clone()]).unwrap(), a);
        assert!(average_runs(&[a.clone(), b])
            .unwrap()
            .volumes
            .iter()
            .all(|&v| v == 2.0));
        assert!(matches!(average_runs(&[]), Err(Error::EmptyList(_))));
        let c = run(Array2::zeros((3, 3)));
        assert!(matches!(average_runs(&[a, c]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn averaging_matches_accumulation_loop() {
        let runs: Vec<RawRun> = (0..5).map(|i| random_run(4, 3, 100 + i)).collect();
        let avg = average_runs(&runs).unwrap();
        for t in 0..4 {
            for v in 0..3 {
                let mut acc = 0.0;
                for r in &runs {
                    acc += r.volumes[[t, v]];
                }
                assert!((avg.volumes[[t, v]] - acc / 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn production_vertex_count_fits_production_grid() {
        assert!(SurfaceLayout::spread(8405, 256, 256).is_ok());
        assert!(SurfaceLayout::spread(65537, 256, 256).is_err());
    }

    #[test]
    fn layout_errors() {
        assert!(matches!(
            SurfaceLayout::new(vec![(0, 0), (0, 0)], 2, 2),
            Err(Error::DuplicateTarget { row: 0, col: 0 })
        ));
        assert!(matches!(
            SurfaceLayout::new(vec![(2, 0)], 2, 2),
            Err(Error::TargetOutOfGrid { .. })
        ));
    }

    #[test]
    fn layout_text_round_trips() {
        let l = SurfaceLayout::spread(10, 4, 4).unwrap();
        assert_eq!(SurfaceLayout::parse(&l.to_text(), 4, 4).unwrap(), l);
    }

    #[test]
    fn pack_matches_scatter_loop_on_random_layout() {
        use rand::seq::SliceRandom;
        let mut rng = rng_for(8, Stream::Synth, 0);
        let mut cells: Vec<(usize, usize)> =
            (0..16).map(|i| (i / 4, i % 4)).collect();
        cells.shuffle(&mut rng);
        cells.truncate(11);
        let layout = SurfaceLayout::new(cells.clone(), 4, 4).unwrap();
        let voxels: Array1<f64> = randn(&[11], &mut rng).into_dimensionality().unwrap();
        let img = pack_surface(voxels.view(), &layout).unwrap();
        let mut oracle = [[0.0f64; 4]; 4];
        for (i, &(r, c)) in cells.iter().enumerate() {
            oracle[r][c] = voxels[i];
        }
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(img[[r, c]], oracle[r][c]);
            }
        }
        assert_eq!(unpack_surface(img.view(), &layout).unwrap(), voxels);
    }

    #[test]
    fn pack_batch_agrees_with_single_pack() {
        let layout = SurfaceLayout::spread(6, 3, 3).unwrap();
        let mut rng = rng_for(9, Stream::Synth, 0);
        let x: Array3<f64> = randn(&[2, 2, 6], &mut rng).into_dimensionality().unwrap();
        let packed = pack_batch(&x, &layout).unwrap();
        for b in 0..2 {
            for s in 0..2 {
                let single = pack_surface(x.slice(ndarray::s![b, s, ..]), &layout).unwrap();
                assert_eq!(packed.slice(ndarray::s![b, s, .., ..]), single);
            }
        }
    }

    proptest! {
        #[test]
        fn zscore_moments(seed in 0u64..1000, t in 2usize..30, v in 1usize..6) {
            let r = random_run(t, v, seed);
            let z = z_transform(&r, DEFAULT_ZSCORE_EPS, StdConvention::Population);
            for col in z.volumes.axis_iter(Axis(1)) {
                let mean = col.sum() / t as f64;
                let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn shift_commutes_with_averaging(seed in 0u64..1000, n in 1usize..4, shift in 0usize..4) {
            let runs: Vec<RawRun> = (0..n).map(|i| random_run(6, 3, seed * 10 + i as u64)).collect();
            let delay = shift as f64 * 2.0;
            let a = hemodynamic_shift(&average_runs(&runs).unwrap(), delay).unwrap();
            let shifted: Vec<RawRun> = runs.iter().map(|r| hemodynamic_shift(r, delay).unwrap()).collect();
            let b = average_runs(&shifted).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn pack_preserves_values(seed in 0u64..1000, n in 1usize..30) {
            let layout = SurfaceLayout::spread(n, 6, 5).unwrap();
            let mut rng = rng_for(seed, Stream::Synth, 1);
            let voxels: Array1<f64> = randn(&[n], &mut rng).into_dimensionality().unwrap();
            let img = pack_surface(voxels.view(), &layout).unwrap();
            let mut packed: Vec<f64> = layout.cells().iter().map(|&(r, c)| img[[r, c]]).collect();
            let mut orig = voxels.to_vec();
            packed.sort_by(f64::total_cmp);
            orig.sort_by(f64::total_cmp);
            prop_assert_eq!(packed, orig);
            let zeros = img.len() - n;
            prop_assert_eq!(img.iter().filter(|&&x| x == 0.0).count() >= zeros, true);
        }
    }
}
