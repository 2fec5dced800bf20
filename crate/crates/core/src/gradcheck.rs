//! Central-difference gradient verification.
//!
//! The numerical side never touches the tape's backward pass: each input
//! element is perturbed by `±h`, the scalar function re-evaluated on a fresh
//! tape, and `(f(x+h) - f(x-h)) / 2h` compared with the reverse-mode result.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst per-input `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-10)`.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
    pub evaluations: usize,
}

/// Compare reverse-mode gradients of `f` against central differences for every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradients_with_step(inputs, DEFAULT_STEP, f)
}

pub fn check_gradients_with_step<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss);
        vars.iter().map(|v| grads.wrt_or_zeros(*v)).collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut evaluations = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Tensor::zeros(inputs[i].raw_dim());
        for j in 0..inputs[i].len() {
            let orig = *work[i].iter().nth(j).unwrap();
            set_flat(&mut work[i], j, orig + step);
            let plus = eval(&work)?;
            set_flat(&mut work[i], j, orig - step);
            let minus = eval(&work)?;
            set_flat(&mut work[i], j, orig);
            evaluations += 2;
            set_flat(&mut numeric, j, (plus - minus) / (2.0 * step));
        }
        let diff = (grad - &numeric).mapv(|x| x * x).sum().sqrt();
        let scale = norm(grad).max(norm(&numeric)).max(1e-10);
        per_input.push(diff / scale);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        evaluations,
    })
}

fn norm(t: &Tensor) -> f64 {
    t.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn set_flat(t: &mut Tensor, index: usize, value: f64) {
    *t.iter_mut().nth(index).unwrap() = value;
}
