//! Hierarchical alignment: a whole-brain patch encoder, one encoder per ROI
//! stream, a residual prior mapping the brain embedding into stimulus-token
//! space, cross-attention fusion of each stream with those tokens, and the
//! mixed contrastive losses used to align everything with stimulus embeddings.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{check_rows_nonzero, mse};
use crate::nn::{Bound, Linear, Mlp, ParamSet, TransformerBlock};
use crate::preprocess::RoiGroup;
use crate::rng::{randn_scaled, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HcamConfig {
    /// Width `D` of the brain and stream embeddings.
    pub dim: usize,
    /// Side of the square surface patches fed to the brain encoder.
    pub patch: usize,
    pub heads: usize,
    /// Whether linear layers carry biases (and the brain encoder a positional table).
    pub bias: bool,
    /// Query/key width of the fusion attention.
    pub attn_dim: usize,
    /// Tokens each stream embedding is split into before fusion.
    pub kv_tokens: usize,
    pub prior_hidden: usize,
    /// Contrastive temperature.
    pub tau: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    /// Probability that a batch row is mixed with another.
    pub mix_prob: f64,
    pub prior_weight: f64,
    pub align_weight: f64,
    /// `clip_high` or `video_embed`.
    pub prior_target: String,
}

impl Default for HcamConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            patch: 8,
            heads: 2,
            bias: true,
            attn_dim: 16,
            kv_tokens: 4,
            prior_hidden: 32,
            tau: 0.1,
            beta_a: 0.15,
            beta_b: 0.15,
            mix_prob: 0.5,
            prior_weight: 1.0,
            align_weight: 1.0,
            prior_target: "clip_high".into(),
        }
    }
}

impl HcamConfig {
    /// Scalar ranges; structural checks happen when the module is sized.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.tau > 0.0) {
            return bad(format!("hcam.tau {} must be positive", self.tau));
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return bad("hcam.beta_a and hcam.beta_b must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return bad(format!("hcam.mix_prob {} outside [0, 1]", self.mix_prob));
        }
        if !(self.prior_weight >= 0.0) {
            return Err(Error::NegativeWeight("prior_weight"));
        }
        if !(self.align_weight >= 0.0) {
            return Err(Error::NegativeWeight("align_weight"));
        }
        if !matches!(self.prior_target.as_str(), "clip_high" | "video_embed") {
            return bad(format!("hcam.prior_target `{}` is not clip_high or video_embed", self.prior_target));
        }
        Ok(())
    }
}

/// Input geometry the module is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HcamDims {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub early: usize,
    pub ventral: usize,
    pub dorsal: usize,
    pub tokens: usize,
    pub channels: usize,
}

impl HcamDims {
    pub fn group(&self, g: RoiGroup) -> usize {
        match g {
            RoiGroup::Early => self.early,
            RoiGroup::Ventral => self.ventral,
            RoiGroup::Dorsal => self.dorsal,
        }
    }
}

/// Mixing recipe for one contrastive batch: row `c` becomes
/// `lam[c] * y[c] + (1 - lam[c]) * y[perm[c]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub perm: Vec<usize>,
    pub lam: Vec<f64>,
    pub tau: f64,
}

impl MixSpec {
    pub fn identity(n: usize, tau: f64) -> Self {
        Self {
            perm: (0..n).collect(),
            lam: vec![1.0; n],
            tau,
        }
    }

    /// Each row is mixed with probability `mix_prob`, taking a uniformly
    /// drawn partner and `lam ~ Beta(a, b)`; other rows keep `lam = 1`.
    pub fn sample(n: usize, tau: f64, beta_a: f64, beta_b: f64, mix_prob: f64, rng: &mut Rng) -> Result<Self> {
        let beta = Beta::new(beta_a, beta_b)
            .map_err(|e| Error::InvalidParameter(format!("beta({beta_a}, {beta_b}): {e}")))?;
        let mut perm = Vec::with_capacity(n);
        let mut lam = Vec::with_capacity(n);
        for c in 0..n {
            if rng.random::<f64>() < mix_prob {
                perm.push(rng.random_range(0..n));
                lam.push(beta.sample(rng));
            } else {
                perm.push(c);
                lam.push(1.0);
            }
        }
        Ok(Self { perm, lam, tau })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.perm.len() != batch || self.lam.len() != batch {
            return Err(Error::shape(format!(
                "mix spec for {} rows applied to {batch}",
                self.perm.len()
            )));
        }
        if let Some(&index) = self.perm.iter().find(|&&m| m >= batch) {
            return Err(Error::BadPermIndex { index, batch });
        }
        if let Some(l) = self.lam.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::InvalidParameter(format!("mixing coefficient {l} outside [0, 1]")));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Mix rows along the leading axis of any array.
pub fn mixco_mix(y: &ArrayD<f64>, spec: &MixSpec) -> Result<ArrayD<f64>> {
    let n = y.shape().first().copied().unwrap_or(0);
    if let Some(&index) = spec.perm.iter().find(|&&m| m >= n) {
        return Err(Error::BadPermIndex { index, batch: n });
    }
    spec.validate(n)?;
    let mut out = y.clone();
    for (c, mut row) in out.outer_iter_mut().enumerate() {
        let lam = spec.lam[c];
        let partner = y.index_axis(Axis(0), spec.perm[c]);
        let own = y.index_axis(Axis(0), c);
        row.assign(&(&own * lam + &partner * (1.0 - lam)));
    }
    Ok(out)
}

/// Coefficient matrices of the four-term mixed contrastive loss. `row[i][k]`
/// weights `log softmax_k sim(y*_i, x_k)`; `col[l][j]` weights
/// `log softmax_l sim(y*_l, x_j)`.
fn bimixco_weights(spec: &MixSpec) -> (Array2<f64>, Array2<f64>) {
    let n = spec.len();
    let mut row = Array2::zeros((n, n));
    let mut col = Array2::zeros((n, n));
    for i in 0..n {
        row[[i, i]] += spec.lam[i];
        row[[i, spec.perm[i]]] += 1.0 - spec.lam[i];
        col[[i, i]] += spec.lam[i];
    }
    for l in 0..n {
        let j = spec.perm[l];
        col[[l, j]] += 1.0 - spec.lam[j];
    }
    (row, col)
}

/// Bidirectional mixed contrastive loss between mixed-input embeddings
/// `[N, d]` and target embeddings `[N, d]` under cosine similarity.
pub fn bimixco_loss<'t>(e_mixed: Var<'t>, e_target: Var<'t>, spec: &MixSpec) -> Result<Var<'t>> {
    let (sa, sb) = (e_mixed.shape(), e_target.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(format!("bimixco between {sa:?} and {sb:?}")));
    }
    let n = sa[0];
    spec.validate(n)?;
    check_rows_nonzero(&e_mixed.value())?;
    check_rows_nonzero(&e_target.value())?;
    let a = e_mixed.l2_normalize(-1, 0.0);
    let b = e_target.l2_normalize(-1, 0.0);
    let sim = a.matmul(b.transpose_last()).scale(1.0 / spec.tau);
    let (w_row, w_col) = bimixco_weights(spec);
    let tape = e_mixed.tape();
    let rows = (sim.log_softmax(1) * tape.constant(w_row.into_dyn())).sum();
    let cols = (sim.log_softmax(0) * tape.constant(w_col.into_dyn())).sum();
    Ok(-(rows + cols).scale(1.0 / (2.0 * n as f64)))
}

/// Mean over the token axis of `[B, S, L, C]`, flattened to `[B*S, C]`.
pub fn pool_tokens<'t>(f: Var<'t>) -> Var<'t> {
    let s = f.shape();
    f.mean_axis(-2, false).reshape(&[s[0] * s[1], s[3]])
}

/// Per-stimulus targets `[B, L, C]` pooled and repeated for `S` subjects.
pub fn pool_targets<'t>(t: Var<'t>, subjects: usize) -> Var<'t> {
    let b = t.dim(0);
    let idx: Vec<usize> = (0..b * subjects).map(|r| r / subjects).collect();
    t.mean_axis(1, false).index_select(0, &idx)
}

/// Sum of three mixed contrastive terms: early fused tokens against
/// early-layer targets, ventral fused tokens and prior output against
/// final-layer targets.
pub fn hierarchical_align_loss<'t>(
    f_early: Var<'t>,
    f_ventral: Var<'t>,
    f_brain: Var<'t>,
    clip_low: Var<'t>,
    clip_high: Var<'t>,
    spec: &MixSpec,
) -> Result<Var<'t>> {
    let subjects = f_brain.dim(1);
    let low = pool_targets(clip_low, subjects);
    let high = pool_targets(clip_high, subjects);
    let a = bimixco_loss(pool_tokens(f_early), low, spec)?;
    let b = bimixco_loss(pool_tokens(f_ventral), high, spec)?;
    let c = bimixco_loss(pool_tokens(f_brain), high, spec)?;
    Ok(a + b + c)
}

pub fn prior_loss<'t>(f_brain: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    mse(f_brain, target)
}

/// Encoder outputs for one forward pass.
#[derive(Clone, Copy)]
pub struct HierarchicalEmbeddings<'t> {
    pub e_brain: Var<'t>,
    pub e_early: Var<'t>,
    pub e_ventral: Var<'t>,
    pub e_dorsal: Var<'t>,
    pub f_brain: Var<'t>,
    pub f_early: Var<'t>,
    pub f_ventral: Var<'t>,
    pub f_dorsal: Var<'t>,
}

/// Queries from stimulus tokens, keys and values from a split stream embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub kv_tokens: usize,
    pub attn_dim: usize,
}

impl CrossAttention {
    pub fn new(name: &str, dim: usize, channels: usize, attn_dim: usize, kv_tokens: usize, bias: bool) -> Result<Self> {
        if kv_tokens == 0 || !dim.is_multiple_of(kv_tokens) {
            return Err(Error::InvalidParameter(format!(
                "embedding width {dim} does not split into {kv_tokens} tokens"
            )));
        }
        let piece = dim / kv_tokens;
        Ok(Self {
            q: Linear::new(format!("{name}.q"), channels, attn_dim, bias),
            k: Linear::new(format!("{name}.k"), piece, attn_dim, bias),
            v: Linear::new(format!("{name}.v"), piece, channels, bias),
            kv_tokens,
            attn_dim,
        })
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) {
        self.q.init(ps, rng);
        self.k.init(ps, rng);
        self.v.init(ps, rng);
    }

    fn keys_values<'t>(&self, p: &Bound<'t>, e_stream: Var<'t>) -> (Var<'t>, Var<'t>) {
        let s = e_stream.shape();
        let piece = s[2] / self.kv_tokens;
        let toks = e_stream.reshape(&[s[0] * s[1], self.kv_tokens, piece]);
        (self.k.forward(p, toks), self.v.forward(p, toks))
    }

    /// Softmax weights `[B*S, L, kv_tokens]`.
    pub fn weights<'t>(&self, p: &Bound<'t>, e_stream: Var<'t>, f_brain: Var<'t>) -> Var<'t> {
        let fs = f_brain.shape();
        let q = self
            .q
            .forward(p, f_brain)
            .reshape(&[fs[0] * fs[1], fs[2], self.attn_dim]);
        let (k, _) = self.keys_values(p, e_stream);
        q.bmm(k.transpose_last())
            .scale(1.0 / (self.attn_dim as f64).sqrt())
            .softmax(-1)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, e_stream: Var<'t>, f_brain: Var<'t>) -> Result<Var<'t>> {
        let (es, fs) = (e_stream.shape(), f_brain.shape());
        if es.len() != 3 || fs.len() != 4 || es[..2] != fs[..2] {
            return Err(Error::shape(format!("fusion of stream {es:?} with tokens {fs:?}")));
        }
        let w = self.weights(p, e_stream, f_brain);
        let (_, v) = self.keys_values(p, e_stream);
        Ok(w.bmm(v).reshape(&fs))
    }
}

#[derive(Debug, Clone)]
pub struct Hcam {
    pub cfg: HcamConfig,
    pub dims: HcamDims,
    patch_embed: Linear,
    block: TransformerBlock,
    brain_out: Linear,
    streams: [Mlp; 3],
    prior_in: Linear,
    prior_tok: Linear,
    prior_mlp: Mlp,
    fuse: [CrossAttention; 3],
}

pub const PREFIX: &str = "hcam";

impl Hcam {
    pub fn new(cfg: HcamConfig, dims: HcamDims) -> Result<Self> {
        let p = cfg.patch;
        if p == 0 || !dims.grid_rows.is_multiple_of(p) || !dims.grid_cols.is_multiple_of(p) {
            return Err(Error::InvalidParameter(format!(
                "patch {p} does not tile a {}x{} grid",
                dims.grid_rows, dims.grid_cols
            )));
        }
        if cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidParameter(format!("{} heads for width {}", cfg.heads, cfg.dim)));
        }
        let d = cfg.dim;
        let (l, c) = (dims.tokens, dims.channels);
        let stream = |g: RoiGroup| Mlp::new(&format!("{PREFIX}.stream.{}", g.name()), dims.group(g), d, d, cfg.bias);
        let fuse = |g: RoiGroup| {
            CrossAttention::new(
                &format!("{PREFIX}.fuse.{}", g.name()),
                d,
                c,
                cfg.attn_dim,
                cfg.kv_tokens,
                cfg.bias,
            )
        };
        Ok(Self {
            patch_embed: Linear::new(format!("{PREFIX}.brain.patch"), p * p, d, cfg.bias),
            block: TransformerBlock::new(&format!("{PREFIX}.brain.block"), d, cfg.heads, 2 * d, cfg.bias),
            brain_out: Linear::new(format!("{PREFIX}.brain.out"), d, d, cfg.bias),
            streams: [stream(RoiGroup::Early), stream(RoiGroup::Ventral), stream(RoiGroup::Dorsal)],
            prior_in: Linear::new(format!("{PREFIX}.prior.in"), d, l * c, cfg.bias),
            prior_tok: Linear::new(format!("{PREFIX}.prior.tok"), l, l, false),
            prior_mlp: Mlp::new(&format!("{PREFIX}.prior.mlp"), c, cfg.prior_hidden, c, cfg.bias),
            fuse: [fuse(RoiGroup::Early)?, fuse(RoiGroup::Ventral)?, fuse(RoiGroup::Dorsal)?],
            cfg,
            dims,
        })
    }

    fn n_patches(&self) -> usize {
        (self.dims.grid_rows / self.cfg.patch) * (self.dims.grid_cols / self.cfg.patch)
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        self.patch_embed.init(&mut ps, rng);
        if self.cfg.bias {
            ps.insert(
                format!("{PREFIX}.brain.pos"),
                randn_scaled(&[self.n_patches(), self.cfg.dim], 0.1, rng),
            );
        }
        self.block.init(&mut ps, rng);
        self.brain_out.init(&mut ps, rng);
        for s in &self.streams {
            s.init(&mut ps, rng);
        }
        self.prior_in.init(&mut ps, rng);
        self.prior_tok.init_scaled(&mut ps, rng, 0.5);
        self.prior_mlp.init(&mut ps, rng);
        for f in &self.fuse {
            f.init(&mut ps, rng);
        }
        ps
    }

    /// `[B, S, H, W]` surface images to `[B, S, D]`.
    pub fn encode_brain<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[2] != self.dims.grid_rows || s[3] != self.dims.grid_cols {
            return Err(Error::shape(format!(
                "brain input {s:?}, expected [B, S, {}, {}]",
                self.dims.grid_rows, self.dims.grid_cols
            )));
        }
        let pz = self.cfg.patch;
        let (gr, gc) = (s[2] / pz, s[3] / pz);
        let n = s[0] * s[1];
        let patches = x
            .reshape(&[n, gr, pz, gc, pz])
            .permute(&[0, 1, 3, 2, 4])
            .reshape(&[n, gr * gc, pz * pz]);
        let mut h = self.patch_embed.forward(p, patches);
        if self.cfg.bias {
            h = h + p.get(&format!("{PREFIX}.brain.pos"));
        }
        let h = self.block.forward(p, h).mean_axis(1, false);
        Ok(self.brain_out.forward(p, h).reshape(&[s[0], s[1], self.cfg.dim]))
    }

    /// `[B, S, V_group]` to `[B, S, D]`.
    pub fn encode_stream<'t>(&self, p: &Bound<'t>, x: Var<'t>, stream: RoiGroup) -> Result<Var<'t>> {
        let s = x.shape();
        let want = self.dims.group(stream);
        if s.len() != 3 || s[2] != want {
            return Err(Error::shape(format!(
                "{} stream input {s:?}, expected [B, S, {want}]",
                stream.name()
            )));
        }
        Ok(self.streams[stream as usize].forward(p, x))
    }

    /// `[B, S, D]` to stimulus-token space `[B, S, L, C]`.
    pub fn prior_transform<'t>(&self, p: &Bound<'t>, e_brain: Var<'t>) -> Result<Var<'t>> {
        let s = e_brain.shape();
        if s.len() != 3 || s[2] != self.cfg.dim {
            return Err(Error::shape(format!("prior input {s:?}")));
        }
        let (l, c) = (self.dims.tokens, self.dims.channels);
        let t0 = self.prior_in.forward(p, e_brain).reshape(&[s[0], s[1], l, c]);
        let mixed = self
            .prior_tok
            .forward(p, t0.permute(&[0, 1, 3, 2]))
            .permute(&[0, 1, 3, 2]);
        let t1 = t0 + mixed;
        Ok(t1 + self.prior_mlp.forward(p, t1))
    }

    pub fn fusion(&self, stream: RoiGroup) -> &CrossAttention {
        &self.fuse[stream as usize]
    }

    pub fn fuse_cross_attention<'t>(
        &self,
        p: &Bound<'t>,
        e_stream: Var<'t>,
        f_brain: Var<'t>,
        stream: RoiGroup,
    ) -> Result<Var<'t>> {
        self.fuse[stream as usize].forward(p, e_stream, f_brain)
    }

    /// Full forward pass from surface images and the three voxel groups.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        surface: Var<'t>,
        groups: [Var<'t>; 3],
    ) -> Result<HierarchicalEmbeddings<'t>> {
        let e_brain = self.encode_brain(p, surface)?;
        let e_early = self.encode_stream(p, groups[0], RoiGroup::Early)?;
        let e_ventral = self.encode_stream(p, groups[1], RoiGroup::Ventral)?;
        let e_dorsal = self.encode_stream(p, groups[2], RoiGroup::Dorsal)?;
        let f_brain = self.prior_transform(p, e_brain)?;
        Ok(HierarchicalEmbeddings {
            e_brain,
            e_early,
            e_ventral,
            e_dorsal,
            f_brain,
            f_early: self.fuse_cross_attention(p, e_early, f_brain, RoiGroup::Early)?,
            f_ventral: self.fuse_cross_attention(p, e_ventral, f_brain, RoiGroup::Ventral)?,
            f_dorsal: self.fuse_cross_attention(p, e_dorsal, f_brain, RoiGroup::Dorsal)?,
        })
    }
}

/// Mix a `[B, S, ...]` input over the flattened `B*S` rows.
pub fn mix_flat(x: &Tensor, spec: &MixSpec) -> Result<Tensor> {
    let s = x.shape().to_vec();
    let n = s[0] * s[1];
    let mut flat_shape = vec![n];
    flat_shape.extend_from_slice(&s[2..]);
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&flat_shape))
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(mixco_mix(&flat, spec)?
        .into_shape_with_order(IxDyn(&s))
        .expect("same size"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::check_gradients;
    use crate::rng::{randn, rng_for, Stream};

    fn dims() -> HcamDims {
        HcamDims {
            grid_rows: 8,
            grid_cols: 8,
            early: 5,
            ventral: 6,
            dorsal: 7,
            tokens: 4,
            channels: 6,
        }
    }

    fn small_cfg(bias: bool) -> HcamConfig {
        HcamConfig {
            dim: 8,
            patch: 4,
            heads: 2,
            bias,
            attn_dim: 4,
            kv_tokens: 2,
            prior_hidden: 8,
            ..HcamConfig::default()
        }
    }

    /// Literal four-sum evaluation used as an independent check.
    fn bimixco_oracle(y: &Array2<f64>, x: &Array2<f64>, spec: &MixSpec) -> f64 {
        let n = y.nrows();
        let unit = |m: &Array2<f64>, i: usize| {
            let r = m.row(i).to_owned();
            let norm = r.dot(&r).sqrt();
            r / norm
        };
        let sim = |i: usize, k: usize| unit(y, i).dot(&unit(x, k)) / spec.tau;
        let log_row = |i: usize, k: usize| sim(i, k) - (0..n).map(|kk| sim(i, kk).exp()).sum::<f64>().ln();
        let log_col = |l: usize, j: usize| sim(l, j) - (0..n).map(|kk| sim(kk, j).exp()).sum::<f64>().ln();
        let mut total = 0.0;
        for i in 0..n {
            total += spec.lam[i] * log_row(i, i);
            total += (1.0 - spec.lam[i]) * log_row(i, spec.perm[i]);
        }
        for j in 0..n {
            total += spec.lam[j] * log_col(j, j);
            for l in (0..n).filter(|&l| spec.perm[l] == j) {
                total += (1.0 - spec.lam[j]) * log_col(l, j);
            }
        }
        -total / (2.0 * n as f64)
    }

    fn symmetric_info_nce_oracle(y: &Array2<f64>, x: &Array2<f64>, tau: f64) -> f64 {
        let n = y.nrows();
        let norm = |m: &Array2<f64>| {
            let mut m = m.clone();
            for mut r in m.outer_iter_mut() {
                let s = r.dot(&r).sqrt();
                r /= s;
            }
            m
        };
        let logits = norm(y).dot(&norm(x).t()) / tau;
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for i in 0..n {
            let row_lse = logits.row(i).mapv(f64::exp).sum().ln();
            let col_lse = logits.column(i).mapv(f64::exp).sum().ln();
            fwd += row_lse - logits[[i, i]];
            bwd += col_lse - logits[[i, i]];
        }
        (fwd + bwd) / (2.0 * n as f64)
    }

    fn mat(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
        randn(&[rows, cols], rng).into_shape_with_order((rows, cols)).unwrap()
    }

    fn eval_bimixco(y: &Array2<f64>, x: &Array2<f64>, spec: &MixSpec) -> Result<f64> {
        let tape = Tape::new();
        let a = tape.constant(y.clone().into_dyn());
        let b = tape.constant(x.clone().into_dyn());
        Ok(bimixco_loss(a, b, spec)?.item())
    }

    #[test]
    fn mix_examples() {
        let y = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap().into_dyn();
        let spec = MixSpec {
            perm: vec![1, 0],
            lam: vec![0.3, 0.3],
            tau: 1.0,
        };
        let out = mixco_mix(&y, &spec).unwrap();
        let expect = [0.3, 0.7, 0.7, 0.3];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let keep = MixSpec { lam: vec![1.0, 1.0], ..spec.clone() };
        assert_eq!(mixco_mix(&y, &keep).unwrap(), y);
        let swap = MixSpec { lam: vec![0.0, 0.0], ..spec.clone() };
        assert_eq!(mixco_mix(&y, &swap).unwrap(), y.select(Axis(0), &[1, 0]));
        let bad = MixSpec { perm: vec![2, 0], ..spec };
        assert!(matches!(mixco_mix(&y, &bad), Err(Error::BadPermIndex { index: 2, batch: 2 })));
    }

    #[test]
    fn single_row_identity_loss_is_zero() {
        let y = Array2::from_shape_vec((1, 3), vec![0.2, -1.0, 0.5]).unwrap();
        let l = eval_bimixco(&y, &y, &MixSpec::identity(1, 0.07)).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let y = Array2::<f64>::eye(2);
        let l = eval_bimixco(&y, &y, &MixSpec::identity(2, 1.0)).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
    }

    #[test]
    fn unmixed_matches_symmetric_info_nce() {
        let mut rng = rng_for(10, Stream::Trials, 0);
        for case in 0..100 {
            let n = 1 + case % 8;
            let d = 2 + case % 15;
            let y = mat(n, d, &mut rng);
            let x = mat(n, d, &mut rng);
            let tau = 0.05 + (case as f64) * 0.01;
            let got = eval_bimixco(&y, &x, &MixSpec::identity(n, tau)).unwrap();
            let want = symmetric_info_nce_oracle(&y, &x, tau);
            assert!((got - want).abs() < 1e-8, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn mixed_matches_four_term_oracle() {
        let mut rng = rng_for(11, Stream::Trials, 0);
        for case in 0..50 {
            let n = 2 + case % 7;
            let y = mat(n, 6, &mut rng);
            let x = mat(n, 6, &mut rng);
            let spec = MixSpec::sample(n, 0.3, 0.15, 0.15, 0.8, &mut rng).unwrap();
            let got = eval_bimixco(&y, &x, &spec).unwrap();
            let want = bimixco_oracle(&y, &x, &spec);
            assert!((got - want).abs() < 1e-8, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_rows_and_bad_temperature_rejected() {
        let mut y = Array2::<f64>::eye(3);
        y[[1, 1]] = 0.0;
        let x = Array2::<f64>::eye(3);
        assert!(matches!(eval_bimixco(&y, &x, &MixSpec::identity(3, 1.0)), Err(Error::ZeroNormRow(1))));
        assert!(eval_bimixco(&x, &x, &MixSpec::identity(3, 0.0)).is_err());
    }

    #[test]
    fn duplicated_rows_change_loss() {
        let mut rng = rng_for(12, Stream::Trials, 0);
        let y = mat(3, 5, &mut rng);
        let x = mat(3, 5, &mut rng);
        let base = eval_bimixco(&y, &x, &MixSpec::identity(3, 0.5)).unwrap();
        let yy = ndarray::concatenate(Axis(0), &[y.view(), y.view()]).unwrap();
        let xx = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let doubled = eval_bimixco(&yy, &xx, &MixSpec::identity(6, 0.5)).unwrap();
        let oracle = symmetric_info_nce_oracle(&yy, &xx, 0.5);
        assert!((doubled - oracle).abs() < 1e-10);
        assert!(doubled > base);
    }

    #[test]
    fn aligned_embeddings_beat_shuffled_targets() {
        let mut rng = rng_for(13, Stream::Trials, 0);
        let (b, s, l, c) = (6, 2, 4, 6);
        let low = randn(&[b, l, c], &mut rng);
        let high = randn(&[b, l, c], &mut rng);
        let tile = |t: &Tensor| {
            let v: Vec<_> = (0..s).map(|_| t.view().insert_axis(Axis(1))).collect();
            ndarray::concatenate(Axis(1), &v).unwrap()
        };
        let eval = |targets_low: &Tensor, targets_high: &Tensor| {
            let tape = Tape::new();
            let fe = tape.constant(tile(&low));
            let fv = tape.constant(tile(&high));
            let fb = tape.constant(tile(&high));
            hierarchical_align_loss(
                fe,
                fv,
                fb,
                tape.constant(targets_low.clone()),
                tape.constant(targets_high.clone()),
                &MixSpec::identity(b * s, 0.01),
            )
            .unwrap()
            .item()
        };
        let aligned = eval(&low, &high);
        let order = [3, 0, 5, 1, 2, 4];
        let shuffled = eval(&low.select(Axis(0), &order), &high.select(Axis(0), &order));
        assert!(aligned * 10.0 <= shuffled, "{aligned} vs {shuffled}");
    }

    #[test]
    fn bimixco_gradients() {
        let mut rng = rng_for(14, Stream::Trials, 0);
        for case in 0..20 {
            let n = 2 + case % 3;
            let d = 3 + case % 5;
            let spec = MixSpec::sample(n, 0.5, 0.15, 0.15, 0.7, &mut rng).unwrap();
            let inputs = [randn(&[n, d], &mut rng), randn(&[n, d], &mut rng)];
            let r = check_gradients(&inputs, |_, v| bimixco_loss(v[0], v[1], &spec)).unwrap();
            assert!(r.max_rel_error < 1e-4, "case {case}: {r:?}");
        }
    }

    fn model(bias: bool) -> (Hcam, ParamSet) {
        let m = Hcam::new(small_cfg(bias), dims()).unwrap();
        let ps = m.init(&mut rng_for(0, Stream::Init, 0));
        (m, ps)
    }

    #[test]
    fn bias_free_encoders_map_zero_to_zero() {
        let (m, ps) = model(false);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let zero = tape.constant(Tensor::zeros(IxDyn(&[2, 3, 8, 8])));
        let e = m.encode_brain(&p, zero).unwrap();
        assert!(e.value().iter().all(|&v| v == 0.0));
        for g in RoiGroup::ALL {
            let x = tape.constant(Tensor::zeros(IxDyn(&[2, 3, dims().group(g)])));
            let e = m.encode_stream(&p, x, g).unwrap();
            assert_eq!(e.shape(), vec![2, 3, 8]);
            assert!(e.value().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoders_equivariant_to_subject_and_batch_order() {
        let (m, ps) = model(true);
        let mut rng = rng_for(1, Stream::Trials, 0);
        let x = randn(&[2, 3, 8, 8], &mut rng);
        let run = |x: Tensor| {
            let tape = Tape::new();
            let p = ps.bind(&tape, false);
            let v = tape.constant(x);
            (*m.encode_brain(&p, v).unwrap().value()).clone()
        };
        let base = run(x.clone());
        let perm_s = run(x.select(Axis(1), &[2, 0, 1]));
        assert_eq!(perm_s, base.select(Axis(1), &[2, 0, 1]));
        let perm_b = run(x.select(Axis(0), &[1, 0]));
        assert_eq!(perm_b, base.select(Axis(0), &[1, 0]));
    }

    #[test]
    fn encoder_input_gradients() {
        let (m, ps) = model(true);
        let mut rng = rng_for(2, Stream::Trials, 0);
        let x = randn(&[1, 2, 8, 8], &mut rng);
        let r = check_gradients(&[x], |tape, v| {
            let p = ps.bind(tape, false);
            Ok(m.encode_brain(&p, v[0])?.sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        for g in RoiGroup::ALL {
            let x = randn(&[2, 2, dims().group(g)], &mut rng);
            let r = check_gradients(&[x], |tape, v| {
                let p = ps.bind(tape, false);
                Ok(m.encode_stream(&p, v[0], g)?.sum())
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{g:?}: {r:?}");
        }
    }

    #[test]
    fn fusion_single_key_returns_value_projection() {
        let d = dims();
        let fuse = CrossAttention::new("f", 6, d.channels, 4, 1, true).unwrap();
        let mut ps = ParamSet::new();
        fuse.init(&mut ps, &mut rng_for(3, Stream::Init, 0));
        let mut rng = rng_for(3, Stream::Trials, 0);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let e = tape.constant(randn(&[2, 1, 6], &mut rng));
        let f = tape.constant(randn(&[2, 1, d.tokens, d.channels], &mut rng));
        let w = fuse.weights(&p, e, f);
        assert!(w.value().iter().all(|&x| x == 1.0));
        let out = fuse.forward(&p, e, f).unwrap();
        let v = fuse.v.forward(&p, e);
        for b in 0..2 {
            for t in 0..d.tokens {
                for c in 0..d.channels {
                    assert!((out.value()[[b, 0, t, c]] - v.value()[[b, 0, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_rows_sum_to_one_and_shape_matches() {
        let (m, ps) = model(true);
        let mut rng = rng_for(4, Stream::Trials, 0);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let e = tape.constant(randn(&[3, 2, 8], &mut rng));
        let f = tape.constant(randn(&[3, 2, 4, 6], &mut rng));
        let w = m.fusion(RoiGroup::Dorsal).weights(&p, e, f);
        for s in w.value().sum_axis(Axis(2)).iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let out = m.fuse_cross_attention(&p, e, f, RoiGroup::Dorsal).unwrap();
        assert_eq!(out.shape(), f.shape());
    }

    #[test]
    fn fusion_parameter_gradients() {
        let (m, ps) = model(true);
        let prefix = format!("{PREFIX}.fuse.ventral");
        let fusion_ps = ps.sub(&prefix);
        let names: Vec<String> = fusion_ps.iter().map(|(k, _)| format!("{prefix}.{k}")).collect();
        let values: Vec<Tensor> = fusion_ps.iter().map(|(_, v)| v.clone()).collect();
        let mut rng = rng_for(5, Stream::Trials, 0);
        let e = randn(&[2, 1, 8], &mut rng);
        let f = randn(&[2, 1, 4, 6], &mut rng);
        let r = check_gradients(&values, |tape, v| {
            let p = Bound::from_vars(&names, v);
            let out = m.fuse_cross_attention(&p, tape.constant(e.clone()), tape.constant(f.clone()), RoiGroup::Ventral)?;
            Ok(out.square().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn prior_loss_gradients() {
        let mut rng = rng_for(6, Stream::Trials, 0);
        for _ in 0..20 {
            let inputs = [randn(&[2, 2, 4, 3], &mut rng), randn(&[2, 2, 4, 3], &mut rng)];
            let r = check_gradients(&inputs, |_, v| prior_loss(v[0], v[1])).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn full_forward_shapes() {
        let (m, ps) = model(true);
        let mut rng = rng_for(7, Stream::Trials, 0);
        let tape = Tape::new();
        let p = ps.bind(&tape, true);
        let surf = tape.constant(randn(&[2, 3, 8, 8], &mut rng));
        let groups = [5, 6, 7].map(|n| tape.constant(randn(&[2, 3, n], &mut rng)));
        let h = m.forward(&p, surf, groups).unwrap();
        for e in [h.e_brain, h.e_early, h.e_ventral, h.e_dorsal] {
            assert_eq!(e.shape(), vec![2, 3, 8]);
        }
        for f in [h.f_brain, h.f_early, h.f_ventral, h.f_dorsal] {
            assert_eq!(f.shape(), vec![2, 3, 4, 6]);
            assert!(f.value().iter().all(|v| v.is_finite()));
        }
    }
}
