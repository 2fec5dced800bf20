//! Parameter storage, layers and the optimizer.
//!
//! Layers are plain descriptors (names and sizes). Their tensors live in a
//! [`ParamSet`] keyed by dotted names; a forward pass binds the set onto a
//! [`Tape`] and each layer looks up its own entries.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{randn_scaled, Rng};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copy every entry of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamSet {
        let head = format!("{prefix}.");
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&head).map(|s| (s.to_string(), v.clone())))
            .collect();
        ParamSet { tensors }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same shapes, every tensor's entries permuted independently.
    pub fn shuffled(&self, rng: &mut Rng) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let mut flat: Vec<f64> = v.iter().copied().collect();
                flat.shuffle(rng);
                let t = Tensor::from_shape_vec(IxDyn(v.shape()), flat).expect("same shape");
                (k.clone(), t)
            })
            .collect();
        ParamSet { tensors }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound {
            vars,
            prefix: String::new(),
        }
    }

    /// Bind with per-name trainability.
    pub fn bind_where<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound {
            vars,
            prefix: String::new(),
        }
    }

    /// Names starting with `prefix.`.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        let head = format!("{prefix}.");
        self.tensors.keys().any(|k| k.starts_with(&head))
    }

    /// Move every entry of `other` in, replacing same-named tensors.
    pub fn merge(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// A [`ParamSet`] recorded on a tape for one forward pass.
#[derive(Clone)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
    prefix: String,
}

impl<'t> Bound<'t> {
    /// Bind already-recorded vars under the given names.
    pub fn from_vars(names: &[String], vars: &[Var<'t>]) -> Bound<'t> {
        Bound {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        let key = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        *self
            .vars
            .get(&key)
            .unwrap_or_else(|| panic!("parameter `{key}` not bound"))
    }

    /// View that resolves names under `prefix.`.
    pub fn scoped(&self, prefix: &str) -> Bound<'t> {
        let prefix = if self.prefix.is_empty() {
            prefix.to_string()
        } else {
            format!("{}.{prefix}", self.prefix)
        };
        Bound {
            vars: self.vars.clone(),
            prefix,
        }
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn grads(&self, g: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), g.wrt_or_zeros(*v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) {
        self.init_scaled(ps, rng, 1.0);
    }

    /// Weights drawn with std `gain / sqrt(d_in)`.
    pub fn init_scaled(&self, ps: &mut ParamSet, rng: &mut Rng, gain: f64) {
        let std = gain / (self.d_in as f64).sqrt();
        ps.insert(
            format!("{}.w", self.name),
            randn_scaled(&[self.d_in, self.d_out], std, rng),
        );
        if self.bias {
            ps.insert(format!("{}.b", self.name), Tensor::zeros(IxDyn(&[self.d_out])));
        }
    }

    pub fn init_zero(&self, ps: &mut ParamSet) {
        ps.insert(
            format!("{}.w", self.name),
            Tensor::zeros(IxDyn(&[self.d_in, self.d_out])),
        );
        if self.bias {
            ps.insert(format!("{}.b", self.name), Tensor::zeros(IxDyn(&[self.d_out])));
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(p.get(&format!("{}.w", self.name)));
        if self.bias {
            y + p.get(&format!("{}.b", self.name))
        } else {
            y
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub bias: bool,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn new(name: impl Into<String>, dim: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            dim,
            bias,
        }
    }

    pub fn init(&self, ps: &mut ParamSet) {
        ps.insert(format!("{}.g", self.name), Tensor::ones(IxDyn(&[self.dim])));
        if self.bias {
            ps.insert(format!("{}.b", self.name), Tensor::zeros(IxDyn(&[self.dim])));
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let centered = x - x.mean_axis(-1, true);
        let var = centered.square().mean_axis(-1, true);
        let y = centered / var.offset(Self::EPS).sqrt() * p.get(&format!("{}.g", self.name));
        if self.bias {
            y + p.get(&format!("{}.b", self.name))
        } else {
            y
        }
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, d_in: usize, hidden: usize, d_out: usize, bias: bool) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), d_in, hidden, bias),
            fc2: Linear::new(format!("{name}.fc2"), hidden, d_out, bias),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) {
        self.fc1.init(ps, rng);
        self.fc2.init(ps, rng);
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        self.fc2.forward(p, self.fc1.forward(p, x).gelu())
    }
}

/// Multi-head self-attention over the second-to-last axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl SelfAttention {
    pub fn new(name: &str, dim: usize, heads: usize, bias: bool) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "dim must split evenly across heads");
        Self {
            heads,
            dim,
            q: Linear::new(format!("{name}.q"), dim, dim, bias),
            k: Linear::new(format!("{name}.k"), dim, dim, bias),
            v: Linear::new(format!("{name}.v"), dim, dim, bias),
            o: Linear::new(format!("{name}.o"), dim, dim, bias),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(ps, rng);
        }
    }

    /// Attention weights, shape `[N, heads, T, T]` for input `[..., T, dim]`.
    pub fn weights<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let (q, k, _) = self.qkv(p, x);
        let dh = (self.dim / self.heads) as f64;
        q.bmm(k.transpose_last()).scale(1.0 / dh.sqrt()).softmax(-1)
    }

    fn qkv<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>) {
        let shape = x.shape();
        let nd = shape.len();
        let t = shape[nd - 2];
        let n: usize = shape[..nd - 2].iter().product();
        let dh = self.dim / self.heads;
        let split = |y: Var<'t>| {
            y.reshape(&[n, t, self.heads, dh])
                .permute(&[0, 2, 1, 3])
        };
        (
            split(self.q.forward(p, x)),
            split(self.k.forward(p, x)),
            split(self.v.forward(p, x)),
        )
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let nd = shape.len();
        let t = shape[nd - 2];
        let n: usize = shape[..nd - 2].iter().product();
        let (q, k, v) = self.qkv(p, x);
        let dh = (self.dim / self.heads) as f64;
        let attn = q.bmm(k.transpose_last()).scale(1.0 / dh.sqrt()).softmax(-1);
        let mixed = attn
            .bmm(v)
            .permute(&[0, 2, 1, 3])
            .reshape(&[n, t, self.dim]);
        self.o.forward(p, mixed).reshape(&shape)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, hidden: usize, bias: bool) -> Self {
        Self {
            ln1: LayerNorm::new(format!("{name}.ln1"), dim, bias),
            attn: SelfAttention::new(&format!("{name}.attn"), dim, heads, bias),
            ln2: LayerNorm::new(format!("{name}.ln2"), dim, bias),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, hidden, dim, bias),
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut Rng) {
        self.ln1.init(ps);
        self.attn.init(ps, rng);
        self.ln2.init(ps);
        self.mlp.init(ps, rng);
    }

    /// Zero the residual-branch outputs so the block starts as the identity.
    pub fn zero_residual_outputs(&self, ps: &mut ParamSet) {
        self.attn.o.init_zero(ps);
        self.mlp.fc2.init_zero(ps);
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let h = x + self.attn.forward(p, self.ln1.forward(p, x));
        h + self.mlp.forward(p, self.ln2.forward(p, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Pipeline(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {name}: {:?} vs {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= c.lr * (update + c.weight_decay * *p);
                });
        }
        Ok(())
    }
}
