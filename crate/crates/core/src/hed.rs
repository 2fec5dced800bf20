//! Auxiliary decoding heads on the fused stream features: captioning and
//! category classification from ventral tokens, a segmentation grid from
//! early tokens, and a per-frame latent prediction from dorsal tokens that
//! the codec stub turns back into a clip. Loss weights follow a cyclical
//! schedule with a distinct start epoch per loss.

use ndarray::{Array2, Array3, Array4, ArrayView4, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hcam::pool_tokens;
use crate::losses::{bce_with_logits, cross_entropy, mse, one_hot};
use crate::nn::{Bound, Linear, ParamSet};
use crate::rng::{randn_scaled, Rng};
use crate::stubs::VaeStub;

pub const PREFIX: &str = "hed";
pub const LOSS_NAMES: [&str; 4] = ["caption", "cls", "seg", "motion"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub start_epoch: usize,
    pub period_epochs: usize,
    pub batches_per_epoch: usize,
}

impl ScheduleSpec {
    pub fn new(start_epoch: usize, period_epochs: usize, batches_per_epoch: usize) -> Result<Self> {
        if period_epochs == 0 || batches_per_epoch == 0 {
            return Err(Error::InvalidParameter(format!(
                "schedule period {period_epochs} and batches per epoch {batches_per_epoch} must be positive"
            )));
        }
        Ok(Self {
            start_epoch,
            period_epochs,
            batches_per_epoch,
        })
    }

    /// Batches in one active period.
    pub fn period_batches(&self) -> usize {
        self.period_epochs * self.batches_per_epoch
    }
}

/// `1 + 9 |sin(pi C / T)|` inside the active window, 1 elsewhere.
pub fn progressive_weight(epoch: usize, batch: usize, spec: &ScheduleSpec) -> Result<f64> {
    if batch >= spec.batches_per_epoch {
        return Err(Error::BadBatchIndex {
            batch,
            per_epoch: spec.batches_per_epoch,
        });
    }
    if epoch < spec.start_epoch || epoch >= spec.start_epoch + spec.period_epochs {
        return Ok(1.0);
    }
    let c = ((epoch - spec.start_epoch) * spec.batches_per_epoch + batch) as f64;
    let t = spec.period_batches() as f64;
    Ok(1.0 + 9.0 * (std::f64::consts::PI * c / t).sin().abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HedWeights {
    pub lambda_caption: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub lambda_motion: f64,
}

impl HedWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_caption, self.lambda_cls, self.lambda_seg, self.lambda_motion]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["lambda_caption", "lambda_cls", "lambda_seg", "lambda_motion"];
        for (name, w) in names.into_iter().zip(self.as_array()) {
            if !(w >= 0.0) {
                return Err(Error::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

/// `sum_k lambda_k * w_k * L_k` over caption, cls, seg, motion.
pub fn hed_total<'t>(losses: [Var<'t>; 4], w: &HedWeights, schedule: [f64; 4]) -> Result<Var<'t>> {
    w.validate()?;
    let lambdas = w.as_array();
    Ok(losses
        .into_iter()
        .enumerate()
        .map(|(k, l)| l.scale(lambdas[k] * schedule[k]))
        .reduce(|a, b| a + b)
        .expect("four losses"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HedConfig {
    pub caption_hidden: usize,
    pub lambda_caption: f64,
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub lambda_motion: f64,
    /// First epoch of the earliest loss schedule.
    pub schedule_start: usize,
    pub schedule_period: usize,
}

impl Default for HedConfig {
    fn default() -> Self {
        Self {
            caption_hidden: 32,
            lambda_caption: 1.0,
            lambda_cls: 1.0,
            lambda_seg: 1.0,
            lambda_motion: 1.0,
            schedule_start: 0,
            schedule_period: 4,
        }
    }
}

impl HedConfig {
    pub fn weights(&self) -> HedWeights {
        HedWeights {
            lambda_caption: self.lambda_caption,
            lambda_cls: self.lambda_cls,
            lambda_seg: self.lambda_seg,
            lambda_motion: self.lambda_motion,
        }
    }

    /// One schedule per loss, loss `k` starting `round(k P / 4)` epochs late.
    pub fn schedules(&self, batches_per_epoch: usize) -> Result<[ScheduleSpec; 4]> {
        let mut out = [ScheduleSpec::new(self.schedule_start, self.schedule_period, batches_per_epoch)?; 4];
        for (k, s) in out.iter_mut().enumerate() {
            s.start_epoch = self.schedule_start + (k as f64 * self.schedule_period as f64 / 4.0).round() as usize;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HedDims {
    pub tokens: usize,
    pub channels: usize,
    pub vocab: usize,
    pub caption_len: usize,
    pub classes: usize,
    pub seg_size: usize,
    pub frames: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
}

impl HedDims {
    pub fn latent_len(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }
}

fn check_tokens(tokens: &Array2<usize>, vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::TokenOutOfVocab { token, vocab }),
        None => Ok(()),
    }
}

/// Mean per-position cross-entropy of logits `[N, T, V]` against tokens `[N, T]`.
pub fn caption_loss<'t>(logits: Var<'t>, tokens: &Array2<usize>) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 3 || s[..2] != *tokens.shape() {
        return Err(Error::shape(format!("caption logits {s:?} for tokens {:?}", tokens.shape())));
    }
    check_tokens(tokens, s[2])?;
    let flat: Vec<usize> = tokens.iter().copied().collect();
    cross_entropy(logits.reshape(&[s[0] * s[1], s[2]]), &flat)
}

pub fn cls_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    cross_entropy(logits, labels)
}

/// Per-pixel binary cross-entropy of logits `[N, H*W]` against masks `[N, H, W]`.
pub fn seg_loss<'t>(logits: Var<'t>, masks: &Tensor) -> Result<Var<'t>> {
    if let Some(&bad) = masks.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::NonBinaryMask(bad));
    }
    let s = masks.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("segmentation masks {s:?}")));
    }
    let flat = masks
        .clone()
        .into_shape_with_order(IxDyn(&[s[0], s[1] * s[2]]))
        .expect("contiguous masks");
    bce_with_logits(logits, &flat)
}

/// MSE between predicted latents `[B, F, S, ...]` and targets `[B, F, ...]`
/// shared by every subject.
pub fn motion_loss<'t>(pred: Var<'t>, blurry: &Tensor) -> Result<Var<'t>> {
    let (ps, ts) = (pred.shape(), blurry.shape().to_vec());
    if ps.len() < 3 || ts.len() + 1 != ps.len() || ps[..2] != ts[..2] || ps[3..] != ts[2..] {
        return Err(Error::shape(format!("latent prediction {ps:?} against target {ts:?}")));
    }
    let target = pred
        .tape()
        .constant(blurry.clone())
        .unsqueeze(2)
        .index_select(2, &vec![0; ps[2]]);
    mse(pred, target)
}

/// Decode latents `[F, C_lat, h, w]` into a grayscale clip `[F, H, W, 1]`.
pub fn decode_latents(latents: ArrayView4<f64>, vae: &VaeStub) -> Array4<f64> {
    let frames: Vec<_> = latents.outer_iter().map(|l| vae.decode(l)).collect();
    let (h, w) = frames[0].dim();
    let mut out = Array4::zeros((frames.len(), h, w, 1));
    for (f, img) in frames.iter().enumerate() {
        out.index_axis_mut(Axis(0), f).index_axis_mut(Axis(2), 0).assign(img);
    }
    out
}

/// Predicted heads for one batch; everything is `[B*S, ...]` except latents.
#[derive(Clone, Copy)]
pub struct HedOutputs<'t> {
    pub caption_logits: Var<'t>,
    pub cls_logits: Var<'t>,
    pub seg_logits: Var<'t>,
    /// `[B, F, S, C_lat, h, w]`.
    pub latents: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct Hed {
    pub cfg: HedConfig,
    pub dims: HedDims,
    cap_ctx: Linear,
    cap_out: Linear,
    cls: Linear,
    seg: Linear,
    latent_dorsal: Linear,
    latent_ctx: Linear,
}

impl Hed {
    pub fn new(cfg: HedConfig, dims: HedDims) -> Result<Self> {
        let d = dims;
        if [d.tokens, d.channels, d.vocab, d.caption_len, d.classes, d.seg_size, d.frames, d.latent_channels, d.latent_size]
            .contains(&0)
            || cfg.caption_hidden == 0
        {
            return Err(Error::InvalidParameter(format!("decoder dimensions must be positive: {d:?}")));
        }
        let flat = d.tokens * d.channels;
        Ok(Self {
            cap_ctx: Linear::new(format!("{PREFIX}.caption.ctx"), d.channels, cfg.caption_hidden, true),
            cap_out: Linear::new(format!("{PREFIX}.caption.out"), cfg.caption_hidden, d.vocab, true),
            cls: Linear::new(format!("{PREFIX}.cls"), d.channels, d.classes, true),
            seg: Linear::new(format!("{PREFIX}.seg"), flat, d.seg_size * d.seg_size, true),
            latent_dorsal: Linear::new(format!("{PREFIX}.latent.dorsal"), flat, d.latent_len(), true),
            latent_ctx: Linear::new(format!("{PREFIX}.latent.ctx"), 2 * flat, d.latent_len(), false),
            cfg,
            dims,
        })
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let d = self.dims;
        let h = self.cfg.caption_hidden;
        let mut ps = ParamSet::new();
        self.cap_ctx.init(&mut ps, rng);
        ps.insert(format!("{PREFIX}.caption.embed"), randn_scaled(&[d.vocab + 1, h], 0.5, rng));
        ps.insert(format!("{PREFIX}.caption.pos"), randn_scaled(&[d.caption_len, h], 0.5, rng));
        self.cap_out.init(&mut ps, rng);
        self.cls.init(&mut ps, rng);
        self.seg.init(&mut ps, rng);
        let mut w = Array2::<f64>::zeros((d.channels, d.frames * d.channels));
        for f in 0..d.frames {
            for c in 0..d.channels {
                w[[c, f * d.channels + c]] = 1.0;
            }
        }
        ps.insert(format!("{PREFIX}.motion.w"), w.into_dyn());
        ps.insert(format!("{PREFIX}.motion.b"), Tensor::zeros(IxDyn(&[d.frames * d.channels])));
        self.latent_dorsal.init(&mut ps, rng);
        self.latent_ctx.init(&mut ps, rng);
        ps
    }

    fn check_tokens4(&self, f: Var<'_>, what: &str) -> Result<()> {
        let s = f.shape();
        if s.len() != 4 || s[2] != self.dims.tokens || s[3] != self.dims.channels {
            return Err(Error::shape(format!(
                "{what} features {s:?}, expected [B, S, {}, {}]",
                self.dims.tokens, self.dims.channels
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits `[N, T, V]`: position `t` sees the pooled
    /// ventral context and token `t-1` (a start symbol at `t = 0`).
    pub fn caption_logits<'t>(&self, p: &Bound<'t>, f_ventral: Var<'t>, tokens: &Array2<usize>) -> Result<Var<'t>> {
        self.check_tokens4(f_ventral, "ventral")?;
        let d = self.dims;
        let n = f_ventral.dim(0) * f_ventral.dim(1);
        if tokens.dim() != (n, d.caption_len) {
            return Err(Error::shape(format!("caption tokens {:?} for {n} rows", tokens.dim())));
        }
        check_tokens(tokens, d.vocab)?;
        let mut prev = Vec::with_capacity(n * d.caption_len);
        for row in tokens.outer_iter() {
            prev.push(d.vocab);
            prev.extend(row.iter().take(d.caption_len - 1));
        }
        self.caption_from_prev(p, f_ventral, &prev)
    }

    fn caption_from_prev<'t>(&self, p: &Bound<'t>, f_ventral: Var<'t>, prev: &[usize]) -> Result<Var<'t>> {
        let d = self.dims;
        let h = self.cfg.caption_hidden;
        let t_len = prev.len() / (f_ventral.dim(0) * f_ventral.dim(1));
        let n = prev.len() / t_len;
        let tape = f_ventral.tape();
        let ctx = self.cap_ctx.forward(p, pool_tokens(f_ventral)).reshape(&[n, 1, h]);
        let onehot = tape.constant(one_hot(prev, d.vocab + 1)?);
        let emb = onehot
            .matmul(p.get(&format!("{PREFIX}.caption.embed")))
            .reshape(&[n, t_len, h]);
        let pos = p.get(&format!("{PREFIX}.caption.pos")).slice(0, 0, t_len);
        let hidden = (ctx + emb + pos).tanh();
        Ok(self.cap_out.forward(p, hidden))
    }

    /// Greedy decoding of `[N, T]` tokens.
    pub fn caption_greedy(&self, params: &ParamSet, f_ventral: &Tensor) -> Result<Array2<usize>> {
        let d = self.dims;
        let n = f_ventral.shape()[0] * f_ventral.shape()[1];
        let mut out = Array2::<usize>::zeros((n, d.caption_len));
        for t in 0..d.caption_len {
            let tape = Tape::new();
            let p = params.bind(&tape, false);
            let f = tape.constant(f_ventral.clone());
            let mut prev = Vec::with_capacity(n * (t + 1));
            for row in out.outer_iter() {
                prev.push(d.vocab);
                prev.extend(row.iter().take(t));
            }
            let logits = self.caption_from_prev(&p, f, &prev)?.value();
            for i in 0..n {
                let mut best = 0;
                for v in 1..d.vocab {
                    if logits[[i, t, v]] > logits[[i, t, best]] {
                        best = v;
                    }
                }
                out[[i, t]] = best;
            }
        }
        Ok(out)
    }

    /// Category logits `[B*S, K]` from mean-pooled ventral tokens.
    pub fn cls_logits<'t>(&self, p: &Bound<'t>, f_ventral: Var<'t>) -> Result<Var<'t>> {
        self.check_tokens4(f_ventral, "ventral")?;
        Ok(self.cls.forward(p, pool_tokens(f_ventral)))
    }

    /// Mask logits `[B*S, H_seg*W_seg]` from the flattened early tokens.
    pub fn seg_logits<'t>(&self, p: &Bound<'t>, f_early: Var<'t>) -> Result<Var<'t>> {
        self.check_tokens4(f_early, "early")?;
        let s = f_early.shape();
        Ok(self.seg.forward(p, f_early.reshape(&[s[0] * s[1], s[2] * s[3]])))
    }

    /// Per-frame channel map: `[B, S, L, C]` to `[B, F, S, L, C]`.
    pub fn motion_project<'t>(&self, p: &Bound<'t>, f_dorsal: Var<'t>, frames: usize) -> Result<Var<'t>> {
        self.check_tokens4(f_dorsal, "dorsal")?;
        if frames != self.dims.frames {
            return Err(Error::shape(format!(
                "frame count {frames} differs from the configured {}",
                self.dims.frames
            )));
        }
        let s = f_dorsal.shape();
        let c = s[3];
        let y = f_dorsal.matmul(p.get(&format!("{PREFIX}.motion.w"))) + p.get(&format!("{PREFIX}.motion.b"));
        Ok(y.reshape(&[s[0], s[1], s[2], frames, c]).permute(&[0, 3, 1, 2, 4]))
    }

    /// Latent prediction `[B, F, S, C_lat, h, w]` from the per-frame dorsal
    /// tokens plus the early and ventral tokens shared by all frames.
    pub fn project_latents<'t>(
        &self,
        p: &Bound<'t>,
        f_dorsal_frames: Var<'t>,
        f_early: Var<'t>,
        f_ventral: Var<'t>,
    ) -> Result<Var<'t>> {
        self.check_tokens4(f_early, "early")?;
        self.check_tokens4(f_ventral, "ventral")?;
        let d = self.dims;
        let fs = f_dorsal_frames.shape();
        let (b, s) = (f_early.dim(0), f_early.dim(1));
        if fs != [b, d.frames, s, d.tokens, d.channels] {
            return Err(Error::shape(format!("dorsal frame features {fs:?}")));
        }
        let flat = d.tokens * d.channels;
        let per_frame = self
            .latent_dorsal
            .forward(p, f_dorsal_frames.reshape(&[b, d.frames, s, flat]));
        let ctx = Var::concat(&[f_early.reshape(&[b, s, flat]), f_ventral.reshape(&[b, s, flat])], -1);
        let shared = self.latent_ctx.forward(p, ctx).unsqueeze(1);
        Ok((per_frame + shared).reshape(&[b, d.frames, s, d.latent_channels, d.latent_size, d.latent_size]))
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        f_early: Var<'t>,
        f_ventral: Var<'t>,
        f_dorsal: Var<'t>,
        captions: &Array2<usize>,
    ) -> Result<HedOutputs<'t>> {
        let frames = self.motion_project(p, f_dorsal, self.dims.frames)?;
        Ok(HedOutputs {
            caption_logits: self.caption_logits(p, f_ventral, captions)?,
            cls_logits: self.cls_logits(p, f_ventral)?,
            seg_logits: self.seg_logits(p, f_early)?,
            latents: self.project_latents(p, frames, f_early, f_ventral)?,
        })
    }

    /// Decode the latent prediction for every `(batch, subject)` pair into
    /// `[F, H, W, 1]` clips, ordered batch-major.
    pub fn reconstruct_stub(
        &self,
        params: &ParamSet,
        f_ventral: &Tensor,
        f_early: &Tensor,
        f_dorsal_frames: &Tensor,
        vae: &VaeStub,
    ) -> Result<Vec<Array4<f64>>> {
        if params.get(&format!("{PREFIX}.latent.dorsal.w")).is_none() {
            return Err(Error::UntrainedHeads);
        }
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let latents = self
            .project_latents(
                &p,
                tape.constant(f_dorsal_frames.clone()),
                tape.constant(f_early.clone()),
                tape.constant(f_ventral.clone()),
            )?
            .value();
        let latents: &Tensor = &latents;
        let s = latents.shape();
        let mut out = Vec::with_capacity(s[0] * s[2]);
        for b in 0..s[0] {
            for subj in 0..s[2] {
                let clip = latents
                    .index_axis(Axis(0), b)
                    .index_axis_move(Axis(1), subj)
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("latent rank");
                out.push(decode_latents(clip, vae));
            }
        }
        Ok(out)
    }
}

/// Repeat per-stimulus rows `[B, ...]` for each of `S` subjects (batch-major).
pub fn repeat_rows<T: Clone>(rows: &[T], subjects: usize) -> Vec<T> {
    rows.iter()
        .flat_map(|r| std::iter::repeat_n(r.clone(), subjects))
        .collect()
}

pub fn repeat_tokens(tokens: &Array2<usize>, subjects: usize) -> Array2<usize> {
    let idx: Vec<usize> = repeat_rows(&(0..tokens.nrows()).collect::<Vec<_>>(), subjects);
    tokens.select(Axis(0), &idx)
}

pub fn repeat_masks(masks: &Array3<f64>, subjects: usize) -> Tensor {
    let idx: Vec<usize> = repeat_rows(&(0..masks.shape()[0]).collect::<Vec<_>>(), subjects);
    masks.select(Axis(0), &idx).into_dyn()
}
