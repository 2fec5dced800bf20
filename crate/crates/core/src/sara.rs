//! Token redistribution adapter: learned register tokens are appended to the
//! stimulus-space tokens, a self-attention block mixes the sequence, and the
//! output splits back into semantic tokens and subject tokens. Three losses
//! shape the split: contrastive alignment of semantic tokens with stimulus
//! embeddings, cross-subject agreement between semantic tokens, and subject
//! classification from subject tokens.

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::hcam::{bimixco_loss, pool_tokens, MixSpec};
use crate::losses::{cross_entropy, info_nce};
use crate::nn::{Bound, Linear, ParamSet, TransformerBlock};
use crate::rng::{randn_scaled, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaraConfig {
    /// Number of register tokens appended to the sequence.
    pub redis_tokens: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Start the redistribution block as the identity map.
    pub identity_init: bool,
    /// Temperature of the alignment loss.
    pub tau: f64,
    /// Temperature of the cross-subject agreement loss.
    pub tau_g: f64,
    pub lambda_align: f64,
    pub lambda_subj: f64,
    pub lambda_generic: f64,
}

impl Default for SaraConfig {
    fn default() -> Self {
        Self {
            redis_tokens: 2,
            heads: 2,
            hidden: 32,
            identity_init: false,
            tau: 0.1,
            tau_g: 0.07,
            lambda_align: 1.0,
            lambda_subj: 0.5,
            lambda_generic: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaraWeights {
    pub lambda_align: f64,
    pub lambda_subj: f64,
    pub lambda_generic: f64,
}

impl SaraWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_align", self.lambda_align),
            ("lambda_subj", self.lambda_subj),
            ("lambda_generic", self.lambda_generic),
        ] {
            if !(w >= 0.0) {
                return Err(Error::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

impl From<&SaraConfig> for SaraWeights {
    fn from(c: &SaraConfig) -> Self {
        Self {
            lambda_align: c.lambda_align,
            lambda_subj: c.lambda_subj,
            lambda_generic: c.lambda_generic,
        }
    }
}

#[derive(Clone, Copy)]
pub struct RedistributionOutput<'t> {
    pub t_sem: Var<'t>,
    pub t_subj: Var<'t>,
}

/// Append the registers `[L_redis, C]` to every `[L, C]` token sequence.
pub fn expand_tokens<'t>(f: Var<'t>, registers: Var<'t>) -> Result<Var<'t>> {
    let (fs, rs) = (f.shape(), registers.shape());
    if fs.len() != 4 || rs.len() != 2 || rs[1] != fs[3] || rs[0] == 0 {
        return Err(Error::shape(format!("expanding tokens {fs:?} with registers {rs:?}")));
    }
    let zeros = f.tape().constant(Tensor::zeros(IxDyn(&[fs[0], fs[1], rs[0], rs[1]])));
    let tiled = zeros + registers.reshape(&[1, 1, rs[0], rs[1]]);
    Ok(Var::concat(&[f, tiled], 2))
}

/// Contrastive alignment of pooled semantic tokens with pooled stimulus
/// tokens, contrasting over the flattened batch-subject axis.
pub fn align_loss<'t>(t_sem: Var<'t>, f_clip: Var<'t>, spec: &MixSpec) -> Result<Var<'t>> {
    if t_sem.shape() != f_clip.shape() || t_sem.ndim() != 4 {
        return Err(Error::shape(format!(
            "align {:?} against {:?}",
            t_sem.shape(),
            f_clip.shape()
        )));
    }
    bimixco_loss(pool_tokens(t_sem), pool_tokens(f_clip), spec)
}

/// Each InfoNCE term between neighbouring subjects `(i-1, i)`, both directions.
pub fn generic_loss_terms<'t>(t_sem: Var<'t>, tau_g: f64) -> Result<Vec<Var<'t>>> {
    let s = t_sem.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("semantic tokens {s:?}")));
    }
    if s[1] < 2 {
        return Err(Error::SingleSubject(s[1]));
    }
    if !(tau_g > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {tau_g} must be positive")));
    }
    let pooled = t_sem.mean_axis(2, false).l2_normalize(-1, 1e-12);
    let subject = |i: usize| pooled.slice(1, i, i + 1).squeeze(1);
    let mut terms = Vec::with_capacity(2 * (s[1] - 1));
    for i in 1..s[1] {
        let (prev, cur) = (subject(i - 1), subject(i));
        terms.push(info_nce(prev, cur, tau_g));
        terms.push(info_nce(cur, prev, tau_g));
    }
    Ok(terms)
}

/// Cross-subject agreement averaged with coefficient `1 / (2 (S - 1))`.
pub fn generic_loss<'t>(t_sem: Var<'t>, tau_g: f64) -> Result<Var<'t>> {
    let terms = generic_loss_terms(t_sem, tau_g)?;
    let count = terms.len() as f64;
    let total = terms
        .into_iter()
        .reduce(|a, b| a + b)
        .expect("at least two terms");
    Ok(total.scale(1.0 / count))
}

/// Mean cross-entropy of subject logits `[B*S, K]` against labels `[B*S]`.
pub fn subject_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    cross_entropy(logits, labels)
}

pub fn sara_total<'t>(align: Var<'t>, subj: Var<'t>, generic: Var<'t>, w: &SaraWeights) -> Result<Var<'t>> {
    w.validate()?;
    Ok(align.scale(w.lambda_align) + subj.scale(w.lambda_subj) + generic.scale(w.lambda_generic))
}

pub const PREFIX: &str = "sara";

#[derive(Debug, Clone)]
pub struct Sara {
    pub cfg: SaraConfig,
    pub channels: usize,
    pub subjects: usize,
    block: TransformerBlock,
    classifier: Linear,
}

impl Sara {
    pub fn new(cfg: SaraConfig, channels: usize, subjects: usize) -> Result<Self> {
        if cfg.redis_tokens == 0 {
            return Err(Error::InvalidParameter("redis_tokens must be at least 1".into()));
        }
        if cfg.heads == 0 || !channels.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidParameter(format!("{} heads for width {channels}", cfg.heads)));
        }
        Ok(Self {
            block: TransformerBlock::new(&format!("{PREFIX}.block"), channels, cfg.heads, cfg.hidden, true),
            classifier: Linear::new(format!("{PREFIX}.subject"), channels, subjects, true),
            cfg,
            channels,
            subjects,
        })
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(
            format!("{PREFIX}.registers"),
            randn_scaled(&[self.cfg.redis_tokens, self.channels], 1.0, rng),
        );
        self.block.init(&mut ps, rng);
        if self.cfg.identity_init {
            self.block.zero_residual_outputs(&mut ps);
        }
        self.classifier.init(&mut ps, rng);
        ps
    }

    pub fn redistribute<'t>(&self, p: &Bound<'t>, f_exp: Var<'t>, tokens: usize) -> Result<RedistributionOutput<'t>> {
        let s = f_exp.shape();
        if s.len() != 4 || s[2] != tokens + self.cfg.redis_tokens || s[3] != self.channels {
            return Err(Error::shape(format!(
                "redistribution input {s:?}, expected [B, S, {}, {}]",
                tokens + self.cfg.redis_tokens,
                self.channels
            )));
        }
        let mixed = self.block.forward(p, f_exp);
        Ok(RedistributionOutput {
            t_sem: mixed.slice(2, 0, tokens),
            t_subj: mixed.slice(2, tokens, s[2]),
        })
    }

    /// Expand and redistribute `[B, S, L, C]` stimulus-space tokens.
    pub fn forward<'t>(&self, p: &Bound<'t>, f: Var<'t>) -> Result<RedistributionOutput<'t>> {
        let tokens = f.dim(2);
        let expanded = expand_tokens(f, p.get(&format!("{PREFIX}.registers")))?;
        self.redistribute(p, expanded, tokens)
    }

    /// Subject logits `[B*S, K]` from mean-pooled subject tokens.
    pub fn subject_logits<'t>(&self, p: &Bound<'t>, t_subj: Var<'t>) -> Var<'t> {
        self.classifier.forward(p, pool_tokens(t_subj))
    }
}

/// Broadcast per-stimulus tokens `[B, L, C]` across `S` subjects.
pub fn tile_subjects<'t>(t: Var<'t>, subjects: usize) -> Var<'t> {
    t.unsqueeze(1).index_select(1, &vec![0; subjects])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::check_gradients;
    use crate::rng::{randn, rng_for, Stream};
    use ndarray::{s, Array2, Axis};

    #[test]
    fn expansion_appends_registers() {
        let mut rng = rng_for(0, Stream::Trials, 0);
        let tape = Tape::new();
        let f = tape.constant(randn(&[2, 3, 4, 5], &mut rng));
        let regs = tape.constant(randn(&[2, 5], &mut rng));
        let out = expand_tokens(f, regs).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 6, 5]);
        let v = out.value();
        assert_eq!(v.slice(s![.., .., 0..4, ..]).into_dyn(), f.value().view());
        for b in 0..2 {
            for subj in 0..3 {
                assert_eq!(v.slice(s![b, subj, 4.., ..]).into_dyn(), regs.value().view());
            }
        }
        let zero = tape.constant(Tensor::zeros(IxDyn(&[1, 5])));
        let out = expand_tokens(f, zero).unwrap();
        assert!(out.value().slice(s![.., .., 4.., ..]).iter().all(|&x| x == 0.0));
    }

    fn sara(identity: bool) -> (Sara, ParamSet) {
        let cfg = SaraConfig {
            identity_init: identity,
            hidden: 8,
            ..SaraConfig::default()
        };
        let m = Sara::new(cfg, 6, 3).unwrap();
        let ps = m.init(&mut rng_for(1, Stream::Init, 0));
        (m, ps)
    }

    #[test]
    fn identity_block_passes_tokens_through() {
        let (m, ps) = sara(true);
        let mut rng = rng_for(2, Stream::Trials, 0);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let f = tape.constant(randn(&[2, 3, 4, 6], &mut rng));
        let out = m.forward(&p, f).unwrap();
        assert_eq!(out.t_sem.shape(), vec![2, 3, 4, 6]);
        assert_eq!(out.t_subj.shape(), vec![2, 3, 2, 6]);
        assert_eq!(*out.t_sem.value(), *f.value());
        let regs = ps.get("sara.registers").unwrap();
        for b in 0..2 {
            for subj in 0..3 {
                assert_eq!(out.t_subj.value().slice(s![b, subj, .., ..]).into_dyn(), regs.view());
            }
        }
    }

    #[test]
    fn block_gradients() {
        let (m, ps) = sara(false);
        let names: Vec<String> = ps.iter().map(|(k, _)| k.clone()).collect();
        let mut values: Vec<Tensor> = ps.iter().map(|(_, v)| v.clone()).collect();
        let mut rng = rng_for(3, Stream::Trials, 0);
        values.push(randn(&[1, 2, 4, 6], &mut rng));
        let r = check_gradients(&values, |_, v| {
            let (params, input) = v.split_at(v.len() - 1);
            let p = Bound::from_vars(&names, params);
            let out = m.forward(&p, input[0])?;
            Ok(out.t_sem.square().sum() + out.t_subj.tanh().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn align_matches_bimixco_on_flattened_tokens() {
        let mut rng = rng_for(4, Stream::Trials, 0);
        let t = randn(&[3, 2, 4, 5], &mut rng);
        let c = randn(&[3, 2, 4, 5], &mut rng);
        let spec = MixSpec::sample(6, 0.2, 0.15, 0.15, 0.5, &mut rng).unwrap();
        let tape = Tape::new();
        let a = align_loss(tape.constant(t.clone()), tape.constant(c.clone()), &spec).unwrap().item();
        let pooled = |x: &Tensor| x.mean_axis(Axis(2)).unwrap().into_shape_with_order(IxDyn(&[6, 5])).unwrap();
        let b = bimixco_loss(tape.constant(pooled(&t)), tape.constant(pooled(&c)), &spec)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn align_identical_beats_shuffled_and_single_is_zero() {
        let mut rng = rng_for(5, Stream::Trials, 0);
        let t = randn(&[4, 2, 3, 6], &mut rng);
        let tape = Tape::new();
        let spec = MixSpec::identity(8, 0.01);
        let same = align_loss(tape.constant(t.clone()), tape.constant(t.clone()), &spec).unwrap().item();
        let shuffled = t.select(Axis(0), &[2, 3, 1, 0]);
        let other = align_loss(tape.constant(t.clone()), tape.constant(shuffled), &spec).unwrap().item();
        assert!(same <= other / 10.0, "{same} vs {other}");
        let one = randn(&[1, 1, 3, 6], &mut rng);
        let single = align_loss(tape.constant(one.clone()), tape.constant(one), &MixSpec::identity(1, 0.1))
            .unwrap()
            .item();
        assert!(single.abs() < 1e-15);
    }

    #[test]
    fn generic_term_count_and_errors() {
        let mut rng = rng_for(6, Stream::Trials, 0);
        for subjects in 2..=5 {
            let tape = Tape::new();
            let t = tape.constant(randn(&[3, subjects, 2, 4], &mut rng));
            assert_eq!(generic_loss_terms(t, 0.07).unwrap().len(), 2 * (subjects - 1));
        }
        let tape = Tape::new();
        let t = tape.constant(randn(&[3, 1, 2, 4], &mut rng));
        assert!(matches!(generic_loss(t, 0.07), Err(Error::SingleSubject(1))));
    }

    #[test]
    fn generic_orthogonal_closed_form() {
        let mut t = Tensor::zeros(IxDyn(&[2, 2, 1, 2]));
        for b in 0..2 {
            for subj in 0..2 {
                t[[b, subj, 0, b]] = 1.0;
            }
        }
        let tape = Tape::new();
        let l = generic_loss(tape.constant(t), 1.0).unwrap().item();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
    }

    #[test]
    fn generic_invariant_to_rotation_and_subject_reversal() {
        let mut rng = rng_for(7, Stream::Trials, 0);
        let t = randn(&[4, 3, 2, 3], &mut rng);
        let tape = Tape::new();
        let base = generic_loss(tape.constant(t.clone()), 0.3).unwrap().item();
        let (c, s_) = (0.6f64, 0.8f64);
        let rot = Array2::from_shape_vec((3, 3), vec![c, -s_, 0.0, s_, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let flat = t.clone().into_shape_with_order((24, 3)).unwrap().dot(&rot);
        let rotated = flat.into_shape_with_order(IxDyn(&[4, 3, 2, 3])).unwrap();
        let r = generic_loss(tape.constant(rotated), 0.3).unwrap().item();
        assert!((r - base).abs() < 1e-9);
        let reversed = t.select(Axis(1), &[2, 1, 0]);
        let rev = generic_loss(tape.constant(reversed), 0.3).unwrap().item();
        assert!((rev - base).abs() < 1e-9);
    }

    #[test]
    fn subject_loss_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(IxDyn(&[4, 3])));
        assert!((subject_loss(uniform, &[0, 1, 2, 1]).unwrap().item() - 3f64.ln()).abs() < 1e-12);
        let mut sat = Tensor::zeros(IxDyn(&[3, 3]));
        for i in 0..3 {
            sat[[i, i]] = 100.0;
        }
        assert!(subject_loss(tape.constant(sat), &[0, 1, 2]).unwrap().item() < 1e-8);
        assert!(matches!(
            subject_loss(uniform, &[0, 1, 3, 1]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let mut rng = rng_for(8, Stream::Trials, 0);
        let z = randn(&[5, 4], &mut rng);
        let labels = [0usize, 3, 1, 2, 3];
        let got = subject_loss(tape.constant(z.clone()), &labels).unwrap().item();
        let want: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = z.slice(s![i, ..]);
                let lse = row.mapv(f64::exp).sum().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / 5.0;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn total_is_weighted_sum() {
        let tape = Tape::new();
        let (a, b, c) = (tape.scalar(0.1), tape.scalar(0.2), tape.scalar(0.3));
        let w = |x, y, z| SaraWeights {
            lambda_align: x,
            lambda_subj: y,
            lambda_generic: z,
        };
        assert_eq!(sara_total(a, b, c, &w(0.0, 0.0, 0.0)).unwrap().item(), 0.0);
        assert!((sara_total(a, b, c, &w(1.0, 1.0, 1.0)).unwrap().item() - 0.6).abs() < 1e-15);
        assert!((sara_total(a, b, c, &w(2.0, 0.0, 1.0)).unwrap().item() - 0.5).abs() < 1e-15);
        assert!(matches!(sara_total(a, b, c, &w(1.0, -1.0, 0.0)), Err(Error::NegativeWeight("lambda_subj"))));
    }

    #[test]
    fn loss_gradients() {
        let mut rng = rng_for(9, Stream::Trials, 0);
        for case in 0..20 {
            let b = 2 + case % 3;
            let subjects = 2 + case % 2;
            let inputs = [randn(&[b, subjects, 2, 3], &mut rng), randn(&[b, subjects, 2, 3], &mut rng)];
            let spec = MixSpec::sample(b * subjects, 0.4, 0.15, 0.15, 0.6, &mut rng).unwrap();
            let r = check_gradients(&inputs, |_, v| align_loss(v[0], v[1], &spec)).unwrap();
            assert!(r.max_rel_error < 1e-4, "align {case}: {r:?}");
            let r = check_gradients(&inputs[..1], |_, v| generic_loss(v[0], 0.5)).unwrap();
            assert!(r.max_rel_error < 1e-4, "generic {case}: {r:?}");
            let labels: Vec<usize> = (0..b * subjects).map(|i| i % subjects).collect();
            let logits = randn(&[b * subjects, subjects], &mut rng);
            let r = check_gradients(&[logits], |_, v| subject_loss(v[0], &labels)).unwrap();
            assert!(r.max_rel_error < 1e-4, "subject {case}: {r:?}");
        }
    }
}
