//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every node that depends on a
//! trainable leaf. Nodes built only from constants carry no gradient and are
//! skipped during the backward sweep.
//!
//! Elementwise binary operations broadcast with numpy semantics; the backward
//! pass sums the incoming gradient back down to each operand's shape.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Gelu(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Sum(usize, usize, bool),
    SumAll(usize),
    LogSumExp(usize, usize),
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    IndexSelect(usize, usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Tensor {
        match self.wrt(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::from_elem(IxDyn(&[]), value))
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let needs = parents.iter().any(|&p| self.needs_grad(p));
        self.push(value, op, needs)
    }

    /// Gradient of the scalar `loss` with respect to every upstream node.
    ///
    /// Panics if `loss` holds more than one element.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(loss.tape, self),
            "loss recorded on a different tape"
        );
        let n = loss.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
            grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.raw_dim()));
        }
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (op, needs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].needs_grad)
            };
            if needs {
                self.propagate(id, &op, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.needs_grad(id) {
            return;
        }
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(id);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                self.accumulate(grads, a, unbroadcast(g.clone(), &sa));
                self.accumulate(grads, b, unbroadcast(g.clone(), &sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
                self.accumulate(grads, a, unbroadcast(g.clone(), &sa));
                self.accumulate(grads, b, unbroadcast(-g, &sb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    self.accumulate(grads, a, unbroadcast(g * &*vb, va.shape()));
                }
                if self.needs_grad(b) {
                    self.accumulate(grads, b, unbroadcast(g * &*va, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs_grad(a) {
                    self.accumulate(grads, a, unbroadcast(g / &*vb, va.shape()));
                }
                if self.needs_grad(b) {
                    let gb = -(g * &*out) / &*vb;
                    self.accumulate(grads, b, unbroadcast(gb, vb.shape()));
                }
            }
            Op::Neg(a) => self.accumulate(grads, a, -g),
            Op::Scale(a, c) => self.accumulate(grads, a, g * c),
            Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, a, g * &*out),
            Op::Log(a) => {
                let va = self.value(a);
                self.accumulate(grads, a, g / &*va);
            }
            Op::Sqrt(a) => self.accumulate(grads, a, g * &out.mapv(|y| 0.5 / y)),
            Op::Tanh(a) => self.accumulate(grads, a, g * &out.mapv(|y| 1.0 - y * y)),
            Op::Sigmoid(a) => self.accumulate(grads, a, g * &out.mapv(|y| y * (1.0 - y))),
            Op::Softplus(a) => {
                let va = self.value(a);
                self.accumulate(grads, a, g * &va.mapv(sigmoid));
            }
            Op::Gelu(a) => {
                let va = self.value(a);
                self.accumulate(grads, a, g * &va.mapv(gelu_grad));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let k = vb.shape()[0];
                let n = vb.shape()[1];
                let b2 = view2(&vb);
                let g_std = g.as_standard_layout();
                let g2 = g_std
                    .view()
                    .into_shape_with_order((g.len() / n, n))
                    .expect("matmul grad reshape");
                if self.needs_grad(a) {
                    let ga = g2.dot(&b2.t());
                    let ga = standard(ga, va.shape());
                    self.accumulate(grads, a, ga);
                }
                if self.needs_grad(b) {
                    let a_std = va.as_standard_layout();
                    let a2 = a_std
                        .view()
                        .into_shape_with_order((va.len() / k, k))
                        .expect("matmul reshape");
                    let gb = a2.t().dot(&g2).into_dyn();
                    self.accumulate(grads, b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let ga_needed = self.needs_grad(a);
                let gb_needed = self.needs_grad(b);
                let (a3, b3, g3) = (as3(&va), as3(&vb), as3(g));
                let batch = a3.shape()[0];
                let mut ga = ga_needed.then(|| ndarray::Array3::<f64>::zeros(a3.raw_dim()));
                let mut gb = gb_needed.then(|| ndarray::Array3::<f64>::zeros(b3.raw_dim()));
                for i in 0..batch {
                    let gi = g3.index_axis(Axis(0), i);
                    if let Some(ga) = ga.as_mut() {
                        let bi = b3.index_axis(Axis(0), i);
                        ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    }
                    if let Some(gb) = gb.as_mut() {
                        let ai = a3.index_axis(Axis(0), i);
                        gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                }
                if let Some(ga) = ga {
                    let ga = standard(ga, va.shape());
                    self.accumulate(grads, a, ga);
                }
                if let Some(gb) = gb {
                    let gb = standard(gb, vb.shape());
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Permute(a, ref axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let ga = g.clone().permuted_axes(IxDyn(&inverse));
                self.accumulate(grads, a, ga.as_standard_layout().into_owned());
            }
            Op::Reshape(a) => {
                let va = self.value(a);
                let ga = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(va.shape()))
                    .expect("reshape grad");
                self.accumulate(grads, a, ga);
            }
            Op::Sum(a, axis, keepdim) => {
                let va = self.value(a);
                let g = if keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let ga = g
                    .broadcast(va.raw_dim())
                    .expect("sum grad broadcast")
                    .to_owned();
                self.accumulate(grads, a, ga);
            }
            Op::SumAll(a) => {
                let va = self.value(a);
                let ga = Tensor::from_elem(va.raw_dim(), g.iter().next().copied().unwrap_or(0.0));
                self.accumulate(grads, a, ga);
            }
            Op::LogSumExp(a, _axis) => {
                let va = self.value(a);
                let soft = (&*va - &*out).mapv(f64::exp);
                self.accumulate(grads, a, soft * g);
            }
            Op::Softmax(a, axis) => {
                let dot = (g * &*out).sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let ga = &*out * &(g - &dot);
                self.accumulate(grads, a, ga);
            }
            Op::Concat(ref parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[axis];
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    self.accumulate(grads, p, piece);
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let va = self.value(a);
                let mut ga = Tensor::zeros(va.raw_dim());
                let len = g.shape()[axis];
                ga.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                self.accumulate(grads, a, ga);
            }
            Op::IndexSelect(a, axis, ref indices) => {
                let va = self.value(a);
                let mut ga = Tensor::zeros(va.raw_dim());
                for (pos, &src) in indices.iter().enumerate() {
                    let mut dst = ga.index_axis_mut(Axis(axis), src);
                    dst += &g.index_axis(Axis(axis), pos);
                }
                self.accumulate(grads, a, ga);
            }
        }
    }
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a matrix")
}

/// Reshape in row-major order whatever memory layout `a` came back in.
fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>, shape: &[usize]) -> Tensor {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count preserved")
}

fn as3(t: &Tensor) -> ndarray::Array3<f64> {
    let nd = t.ndim();
    let (m, n) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((t.len() / (m * n), m, n))
        .expect("batch reshape")
}

/// Sum `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn unbroadcast(mut g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn axis_of(ndim: usize, axis: isize) -> usize {
    if axis < 0 {
        (ndim as isize + axis) as usize
    } else {
        axis as usize
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.ndim()
    }

    pub fn dim(&self, axis: isize) -> usize {
        let shape = self.shape();
        shape[axis_of(shape.len(), axis)]
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().mapv(f);
        self.tape.record(v, op, &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// `self[..., m, k] @ rhs[k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (va, vb) = (self.value(), rhs.value());
        assert_eq!(vb.ndim(), 2, "matmul rhs must be a matrix");
        let k = vb.shape()[0];
        let n = vb.shape()[1];
        assert_eq!(
            va.shape()[va.ndim() - 1],
            k,
            "matmul inner dims {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let a_std = va.as_standard_layout();
        let a2 = a_std
            .view()
            .into_shape_with_order((va.len() / k, k))
            .expect("matmul reshape");
        let out = a2.dot(&view2(&vb));
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = standard(out, &shape);
        self.tape
            .record(out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// `self[..., m, k] @ rhs[..., k, n]` with identical leading dims.
    pub fn bmm(self, rhs: Var<'t>) -> Var<'t> {
        let (va, vb) = (self.value(), rhs.value());
        let nd = va.ndim();
        assert!(nd >= 3 && vb.ndim() == nd, "bmm needs matching batched operands");
        assert_eq!(&va.shape()[..nd - 2], &vb.shape()[..nd - 2], "bmm batch dims");
        let (a3, b3) = (as3(&va), as3(&vb));
        let batch = a3.shape()[0];
        let (m, n) = (a3.shape()[1], b3.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
        for i in 0..batch {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let mut shape = va.shape().to_vec();
        shape[nd - 1] = n;
        let out = standard(out, &shape);
        self.tape
            .record(out, Op::BatchMatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let v = self.value();
        let out = (*v)
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.tape
            .record(out, Op::Permute(self.id, axes.to_vec()), &[self.id])
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Var<'t> {
        let nd = self.ndim();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let out = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} into {:?}", v.shape(), shape));
        self.tape.record(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn sum_axis(self, axis: isize, keepdim: bool) -> Var<'t> {
        let v = self.value();
        let ax = axis_of(v.ndim(), axis);
        let mut out = v.sum_axis(Axis(ax));
        if keepdim {
            out = out.insert_axis(Axis(ax));
        }
        self.tape
            .record(out, Op::Sum(self.id, ax, keepdim), &[self.id])
    }

    pub fn mean_axis(self, axis: isize, keepdim: bool) -> Var<'t> {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape
            .record(Tensor::from_elem(IxDyn(&[]), s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `log(sum(exp(x)))` along `axis`, kept as a length-1 axis.
    pub fn logsumexp(self, axis: isize) -> Var<'t> {
        let v = self.value();
        let ax = axis_of(v.ndim(), axis);
        let max = v
            .fold_axis(Axis(ax), f64::NEG_INFINITY, |&m, &x| m.max(x))
            .insert_axis(Axis(ax));
        let sum = (&*v - &max).mapv(f64::exp).sum_axis(Axis(ax)).insert_axis(Axis(ax));
        let out = &max + &sum.mapv(f64::ln);
        self.tape
            .record(out, Op::LogSumExp(self.id, ax), &[self.id])
    }

    pub fn softmax(self, axis: isize) -> Var<'t> {
        let v = self.value();
        let ax = axis_of(v.ndim(), axis);
        let max = v
            .fold_axis(Axis(ax), f64::NEG_INFINITY, |&m, &x| m.max(x))
            .insert_axis(Axis(ax));
        let e = (&*v - &max).mapv(f64::exp);
        let s = e.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        let out = e / &s;
        self.tape.record(out, Op::Softmax(self.id, ax), &[self.id])
    }

    pub fn log_softmax(self, axis: isize) -> Var<'t> {
        self - self.logsumexp(axis)
    }

    /// Divide by the L2 norm along `axis` (norm floored by `eps` inside the root).
    pub fn l2_normalize(self, axis: isize, eps: f64) -> Var<'t> {
        let norm = self.square().sum_axis(axis, true).offset(eps).sqrt();
        self / norm
    }

    pub fn concat(parts: &[Var<'t>], axis: isize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let ax = axis_of(values[0].ndim(), axis);
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(ax), &views).expect("concat shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(out, Op::Concat(ids.clone(), ax), &ids)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: isize, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        let ax = axis_of(v.ndim(), axis);
        let out = v.slice_axis(Axis(ax), Slice::from(start..end)).to_owned();
        self.tape
            .record(out, Op::Slice(self.id, ax, start), &[self.id])
    }

    /// Gather entries along `axis` (repeats allowed).
    pub fn index_select(self, axis: isize, indices: &[usize]) -> Var<'t> {
        let v = self.value();
        let ax = axis_of(v.ndim(), axis);
        let out = v.select(Axis(ax), indices);
        self.tape.record(
            out,
            Op::IndexSelect(self.id, ax, indices.to_vec()),
            &[self.id],
        )
    }

    /// Drop a length-1 axis.
    pub fn squeeze(self, axis: isize) -> Var<'t> {
        let mut shape = self.shape();
        let ax = axis_of(shape.len(), axis);
        assert_eq!(shape[ax], 1, "squeeze of non-singleton axis");
        shape.remove(ax);
        self.reshape(&shape)
    }

    /// Insert a length-1 axis at `axis`.
    pub fn unsqueeze(self, axis: usize) -> Var<'t> {
        let mut shape = self.shape();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $op:tt) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let (a, b) = (self.value(), rhs.value());
                let out = &*a $op &*b;
                self.tape.record(out, Op::$variant(self.id, rhs.id), &[self.id, rhs.id])
            }
        }
    };
}

binary_op!(Add, add, Add, +);
binary_op!(Sub, sub, Sub, -);
binary_op!(Mul, mul, Mul, *);
binary_op!(Div, div, Div, /);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.offset(c)
    }
}

/// Matrix view helper for callers holding plain tensors.
pub fn to_matrix(t: &Tensor, rows: usize, cols: usize) -> Array2<f64> {
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("matrix reshape")
}
