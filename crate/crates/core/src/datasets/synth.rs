//! Synthetic recordings with planted structure.
//!
//! Each stimulus is a short clip of drifting Gaussian blobs driven by a
//! semantic factor `z_sem = [velocity (2); appearance (semantic_dim - 2)]`.
//! The voxel response of subject `s` is `A_s g(z_sem) + h_s + noise`, where
//! `g` sends a coarse luminance map to early voxels, a category code to
//! ventral voxels and a motion code to dorsal voxels, `A_s` is a per-group
//! orthogonal mixing and `h_s` a fixed subject signature.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::datasets::SynthSpec;
use crate::error::{Error, Result};
use crate::preprocess::{load_roi_scheme, synthetic_atlas, AtlasTable, RoiGroup, RoiScheme, SchemeId};
use crate::rng::{randn, rng_for, Rng, Stream};
use crate::stubs::{gaussian_blur, ClipStub, VaeStub};

const BLOB_SIGMA_FRACTION: f64 = 0.15;
const PIXEL_GAIN: f64 = 2.0;
const VELOCITY_SCALE: f64 = 0.75;
const BLUR_SIGMA: f64 = 1.0;
const EARLY_GRID: usize = 4;

/// Per-stimulus targets, indexed by stimulus id along the first axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub clip_low: Array3<f64>,
    pub clip_high: Array3<f64>,
    pub video_embed: Array3<f64>,
    pub captions: Array2<i32>,
    pub labels: Array1<i32>,
    pub seg_masks: Array3<u8>,
    /// `[n, F, C_lat, H_lat, W_lat]`
    pub blurry_latents: ArrayD<f64>,
    /// `[n, F, H_img, W_img]`
    pub frames: Array4<f64>,
    pub z_sem: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub atlas: AtlasTable,
    /// `[n_records, V]`, stimulus-major: record `j * S + s`.
    pub voxels: Array2<f64>,
    pub subject_ids: Array1<i32>,
    pub stimulus_ids: Array1<i32>,
    pub subject_factors: Array2<f64>,
    pub targets: TargetSet,
}

/// Fixed random quantities shared by every stimulus.
struct World {
    centers: Vec<(f64, f64)>,
    class_proj: Array2<f64>,
    u_early: Array2<f64>,
    u_ventral: Array2<f64>,
    u_dorsal: Array2<f64>,
    u_subject: Array2<f64>,
}

fn randn2(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Array2<f64> {
    randn(&[rows, cols], rng)
        .into_shape_with_order((rows, cols))
        .expect("shape")
        * std
}

impl World {
    fn new(spec: &SynthSpec, scheme: &RoiScheme) -> Self {
        let mut rng = rng_for(spec.seed, Stream::Synth, 0);
        let n_app = spec.semantic_dim - 2;
        let size = spec.image_size as f64;
        let pos = Uniform::new(0.2 * size, 0.8 * size).expect("range");
        let centers = (0..n_app)
            .map(|_| (pos.sample(&mut rng), pos.sample(&mut rng)))
            .collect();
        let class_proj = randn2(spec.n_classes, n_app, 1.0, &mut rng);
        let early_code = EARLY_GRID * EARLY_GRID;
        let ventral_code = spec.n_classes + n_app;
        let u_early = randn2(scheme.group_len(RoiGroup::Early), early_code, 1.0, &mut rng);
        let u_ventral = randn2(scheme.group_len(RoiGroup::Ventral), ventral_code, 1.0, &mut rng);
        let u_dorsal = randn2(scheme.group_len(RoiGroup::Dorsal), 4, 1.0, &mut rng);
        let u_subject = randn2(
            spec.voxels,
            spec.subject_dim,
            1.0 / (spec.subject_dim as f64).sqrt(),
            &mut rng,
        );
        Self {
            centers,
            class_proj,
            u_early,
            u_ventral,
            u_dorsal,
            u_subject,
        }
    }

    /// Pre-sigmoid luminance at `(row, col)` for frame offset `(dy, dx)`.
    fn field(&self, spec: &SynthSpec, app: &[f64], row: f64, col: f64, dy: f64, dx: f64) -> f64 {
        let sigma = BLOB_SIGMA_FRACTION * spec.image_size as f64;
        let denom = 2.0 * sigma * sigma;
        app.iter()
            .zip(&self.centers)
            .map(|(a, (cy, cx))| {
                let ry = row - cy - dy;
                let rx = col - cx - dx;
                a * (-(ry * ry + rx * rx) / denom).exp()
            })
            .sum()
    }

    fn class_scores(&self, app: &[f64]) -> Array1<f64> {
        self.class_proj.dot(&Array1::from(app.to_vec()))
    }
}

/// Frame index that serves as the clip's keyframe.
pub fn keyframe_index(frames: usize) -> usize {
    frames / 2
}

fn velocity(z: &[f64]) -> (f64, f64) {
    (VELOCITY_SCALE * z[0], VELOCITY_SCALE * z[1])
}

fn render(world: &World, spec: &SynthSpec, z: &[f64]) -> Array3<f64> {
    let (vy, vx) = velocity(z);
    let app = &z[2..];
    let key = keyframe_index(spec.frames) as f64;
    let n = spec.image_size;
    Array3::from_shape_fn((spec.frames, n, n), |(t, r, c)| {
        let dt = t as f64 - key;
        let v = world.field(spec, app, r as f64 + 0.5, c as f64 + 0.5, vy * dt, vx * dt);
        crate::autograd::sigmoid(PIXEL_GAIN * v)
    })
}

fn caption(spec: &SynthSpec, label: usize, z: &[f64]) -> Vec<i32> {
    let (vy, vx) = velocity(z);
    let k = spec.n_classes;
    let quadrant = match (vx >= 0.0, vy >= 0.0) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    };
    let bright = usize::from(z[2..].iter().sum::<f64>() > 0.0);
    let fast = usize::from((vx * vx + vy * vy).sqrt() > VELOCITY_SCALE * 1.25);
    let full = [label, k + quadrant, k + 4 + bright, k + 6 + fast];
    full[..spec.caption_len].iter().map(|&t| t as i32).collect()
}

fn seg_mask(spec: &SynthSpec, key: &ndarray::ArrayView2<f64>) -> Array2<u8> {
    let f = spec.image_size / spec.seg_size;
    Array2::from_shape_fn((spec.seg_size, spec.seg_size), |(i, j)| {
        let block = key.slice(s![i * f..(i + 1) * f, j * f..(j + 1) * f]);
        u8::from(block.mean().expect("block") > 0.5)
    })
}

/// Noise-free code `g(z)` before per-voxel standardization.
fn voxel_code(world: &World, spec: &SynthSpec, scheme: &RoiScheme, z: &[f64]) -> Array1<f64> {
    let (vy, vx) = velocity(z);
    let app = &z[2..];
    let cell = spec.image_size as f64 / EARLY_GRID as f64;
    let early_code = Array1::from_shape_fn(EARLY_GRID * EARLY_GRID, |p| {
        let (i, j) = (p / EARLY_GRID, p % EARLY_GRID);
        world.field(spec, app, (i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell, 0.0, 0.0)
    });
    let scores = world.class_scores(app) * 2.0;
    let max = scores.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = scores.mapv(|x| (x - max).exp());
    let probs = &e / e.sum();
    let mut ventral_code = Array1::zeros(spec.n_classes + app.len());
    ventral_code.slice_mut(s![..spec.n_classes]).assign(&(probs * 2.0));
    ventral_code.slice_mut(s![spec.n_classes..]).assign(&Array1::from(app.to_vec()));
    let dorsal_code = Array1::from(vec![vy, vx, vy * vy - vx * vx, 2.0 * vx * vy]);

    let mut g = Array1::zeros(spec.voxels);
    for (group, u, code) in [
        (RoiGroup::Early, &world.u_early, &early_code),
        (RoiGroup::Ventral, &world.u_ventral, &ventral_code),
        (RoiGroup::Dorsal, &world.u_dorsal, &dorsal_code),
    ] {
        let vals = u.dot(code);
        for (k, &idx) in scheme.group_indices(group).iter().enumerate() {
            g[idx] = vals[k];
        }
    }
    g
}

/// `qr(I + rho * G)` with the sign convention that makes `rho = 0` the identity.
pub fn near_identity_orthogonal(n: usize, rho: f64, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |i, j| {
        let x: f64 = StandardNormal.sample(rng);
        f64::from(u8::from(i == j)) + rho * x
    });
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn validate_spec(spec: &SynthSpec) -> Result<()> {
    let bad = |msg: String| Err(Error::InvalidParameter(msg));
    let positive = [
        ("n_subjects", spec.n_subjects),
        ("n_samples", spec.n_samples),
        ("voxels", spec.voxels),
        ("grid_rows", spec.grid_rows),
        ("grid_cols", spec.grid_cols),
        ("frames", spec.frames),
        ("image_size", spec.image_size),
        ("n_classes", spec.n_classes),
        ("vocab_size", spec.vocab_size),
        ("caption_len", spec.caption_len),
        ("subject_dim", spec.subject_dim),
        ("seg_size", spec.seg_size),
    ];
    for (name, v) in positive {
        if v == 0 {
            return bad(format!("{name} must be at least 1"));
        }
    }
    if spec.semantic_dim < 3 {
        return bad("semantic_dim must be at least 3 (2 motion + appearance)".into());
    }
    if spec.caption_len > 4 {
        return bad("caption_len is at most 4".into());
    }
    if spec.vocab_size < spec.n_classes + 8 {
        return bad(format!("vocab_size must be at least n_classes + 8 = {}", spec.n_classes + 8));
    }
    if !spec.image_size.is_multiple_of(spec.seg_size) {
        return bad("seg_size must divide image_size".into());
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.subject_rotation >= 0.0) || !(spec.subject_offset >= 0.0) {
        return bad("noise_sigma, subject_rotation and subject_offset must be nonnegative".into());
    }
    if spec.voxels > spec.grid_rows * spec.grid_cols {
        return bad("voxels exceed the surface grid".into());
    }
    ClipStub::new(
        spec.image_size,
        spec.clip_tokens,
        spec.clip_channels,
        spec.clip_layers,
        spec.clip_low_layer,
    )?;
    VaeStub::new(spec.image_size, spec.latent_size, spec.latent_channels)?;
    Ok(())
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    validate_spec(spec)?;
    let atlas = synthetic_atlas(spec.voxels)?;
    let scheme = load_roi_scheme(SchemeId::A, &atlas)?;
    let world = World::new(spec, &scheme);
    let clip = ClipStub::new(
        spec.image_size,
        spec.clip_tokens,
        spec.clip_channels,
        spec.clip_layers,
        spec.clip_low_layer,
    )?;
    let vae = VaeStub::new(spec.image_size, spec.latent_size, spec.latent_channels)?;
    let n = spec.n_samples;
    let (l, c) = (spec.clip_tokens, spec.clip_channels);
    let key = keyframe_index(spec.frames);

    let mut z_sem = Array2::zeros((n, spec.semantic_dim));
    let mut codes = Array2::zeros((n, spec.voxels));
    let mut clip_low = Array3::zeros((n, l, c));
    let mut clip_high = Array3::zeros((n, l, c));
    let mut video_embed = Array3::zeros((n, l, c));
    let mut captions = Array2::zeros((n, spec.caption_len));
    let mut labels = Array1::zeros(n);
    let mut seg_masks = Array3::zeros((n, spec.seg_size, spec.seg_size));
    let mut latents = ArrayD::zeros(IxDyn(&[
        n,
        spec.frames,
        spec.latent_channels,
        spec.latent_size,
        spec.latent_size,
    ]));
    let mut frames_all = Array4::zeros((n, spec.frames, spec.image_size, spec.image_size));

    for j in 0..n {
        let mut rng = rng_for(spec.seed, Stream::Synth, 1 + j as u64);
        let z: Vec<f64> = (0..spec.semantic_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        z_sem.row_mut(j).assign(&Array1::from(z.clone()));
        let frames = render(&world, spec, &z);
        let scores = world.class_scores(&z[2..]);
        let label = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
            .0;
        labels[j] = label as i32;
        for (t, tok) in caption(spec, label, &z).into_iter().enumerate() {
            captions[[j, t]] = tok;
        }
        let keyframe = frames.index_axis(Axis(0), key);
        seg_masks.slice_mut(s![j, .., ..]).assign(&seg_mask(spec, &keyframe));
        let (lo, hi) = clip.embed(keyframe);
        clip_low.slice_mut(s![j, .., ..]).assign(&lo);
        clip_high.slice_mut(s![j, .., ..]).assign(&hi);
        let mut video = Array2::<f64>::zeros((l, c));
        for (t, frame) in frames.outer_iter().enumerate() {
            video += &clip.embed_high(frame);
            let lat = vae.encode(gaussian_blur(frame, BLUR_SIGMA).view());
            latents.slice_mut(s![j, t, .., .., ..]).assign(&lat);
        }
        video_embed
            .slice_mut(s![j, .., ..])
            .assign(&(video / spec.frames as f64));
        codes.row_mut(j).assign(&voxel_code(&world, spec, &scheme, &z));
        frames_all.slice_mut(s![j, .., .., ..]).assign(&frames);
    }

    // Standardize each voxel's noise-free code over the stimulus set.
    let mean = codes.mean_axis(Axis(0)).expect("stimuli");
    let std = codes.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-12));
    let codes = (codes - &mean) / &std;

    let s_count = spec.n_subjects;
    let mut subject_factors = Array2::zeros((s_count, spec.subject_dim));
    let mut mixes = Vec::with_capacity(s_count);
    let mut offsets = Vec::with_capacity(s_count);
    for subj in 0..s_count {
        let mut rng = rng_for(spec.seed, Stream::Synth, (1 << 40) + subj as u64);
        let groups: Vec<(Vec<usize>, DMatrix<f64>)> = RoiGroup::ALL
            .iter()
            .map(|&g| {
                let idx = scheme.group_indices(g);
                let q = near_identity_orthogonal(idx.len(), spec.subject_rotation, &mut rng);
                (idx, q)
            })
            .collect();
        let zs: Array1<f64> = (0..spec.subject_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        subject_factors.row_mut(subj).assign(&zs);
        offsets.push(world.u_subject.dot(&zs) * spec.subject_offset);
        mixes.push(groups);
    }

    let records = n * s_count;
    let mut voxels = Array2::zeros((records, spec.voxels));
    let mut subject_ids = Array1::zeros(records);
    let mut stimulus_ids = Array1::zeros(records);
    for j in 0..n {
        let g = codes.row(j);
        for subj in 0..s_count {
            let r = j * s_count + subj;
            let mut rng = rng_for(spec.seed, Stream::Synth, (2 << 40) + r as u64);
            let mut x = offsets[subj].clone();
            for (idx, q) in &mixes[subj] {
                for (a, &row_idx) in idx.iter().enumerate() {
                    let mut acc = 0.0;
                    for (b, &col_idx) in idx.iter().enumerate() {
                        acc += q[(a, b)] * g[col_idx];
                    }
                    x[row_idx] += acc;
                }
            }
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += spec.noise_sigma * e;
            }
            voxels.row_mut(r).assign(&x);
            subject_ids[r] = subj as i32;
            stimulus_ids[r] = j as i32;
        }
    }

    Ok(SynthData {
        atlas,
        voxels,
        subject_ids,
        stimulus_ids,
        subject_factors,
        targets: TargetSet {
            clip_low,
            clip_high,
            video_embed,
            captions,
            labels,
            seg_masks,
            blurry_latents: latents,
            frames: frames_all,
            z_sem,
        },
    })
}
