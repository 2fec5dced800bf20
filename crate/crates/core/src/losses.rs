//! Loss primitives shared by the alignment, adapter and decoder objectives.

use ndarray::{Array2, IxDyn};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};

/// Mean over elements of `(pred - target)^2`.
pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse of {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok((pred - target).square().mean())
}

/// One-hot rows as a constant-ready tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut out = Array2::<f64>::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        out[[i, l]] = 1.0;
    }
    Ok(out.into_dyn())
}

/// Mean softmax cross-entropy of `logits [N, K]` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(format!(
            "cross entropy logits {:?} for {} labels",
            shape,
            labels.len()
        )));
    }
    let target = logits.tape().constant(one_hot(labels, shape[1])?);
    let picked = (logits.log_softmax(-1) * target).sum();
    Ok(-picked.scale(1.0 / labels.len() as f64))
}

/// Mean binary cross-entropy with logits: `softplus(z) - y z`.
pub fn bce_with_logits<'t>(logits: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "bce logits {:?} against targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let y = logits.tape().constant(targets.clone());
    Ok((logits.softplus() - logits * y).mean())
}

/// Reject rows whose L2 norm is (numerically) zero.
pub fn check_rows_nonzero(v: &Tensor) -> Result<()> {
    let cols = v.shape().last().copied().unwrap_or(1);
    let rows = v.len() / cols.max(1);
    let flat = v
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[rows, cols]))
        .expect("row view");
    for (i, row) in flat.outer_iter().enumerate() {
        if row.iter().map(|x| x * x).sum::<f64>() < 1e-24 {
            return Err(Error::ZeroNormRow(i));
        }
    }
    Ok(())
}

/// One direction of InfoNCE: rows of `a` against rows of `b` (both already
/// L2-normalized), positives on the diagonal, mean over rows.
pub fn info_nce<'t>(a: Var<'t>, b: Var<'t>, tau: f64) -> Var<'t> {
    let n = a.dim(0);
    let logits = a.matmul(b.transpose_last()).scale(1.0 / tau);
    let eye = a.tape().constant(Array2::<f64>::eye(n).into_dyn());
    -(logits.log_softmax(-1) * eye).sum().scale(1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::check_gradients;
    use crate::rng::{randn, rng_for, Stream};

    #[test]
    fn mse_conventions() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::from_elem(IxDyn(&[2, 3]), 0.5));
        let p = tape.constant(Tensor::from_elem(IxDyn(&[2, 3]), 1.5));
        assert_eq!(mse(t, t).unwrap().item(), 0.0);
        assert_eq!(mse(p, t).unwrap().item(), 1.0);
        let wrong = tape.constant(Tensor::zeros(IxDyn(&[3, 2])));
        assert!(mse(p, wrong).is_err());
    }

    #[test]
    fn mse_gradient_is_scaled_difference() {
        let mut rng = rng_for(1, Stream::Init, 0);
        let pred = randn(&[3, 4], &mut rng);
        let target = randn(&[3, 4], &mut rng);
        let tape = Tape::new();
        let p = tape.param(pred.clone());
        let t = tape.constant(target.clone());
        let g = tape.backward(mse(p, t).unwrap());
        let expected = (&pred - &target) * (2.0 / 12.0);
        let diff = (g.wrt(p).unwrap() - &expected).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
        let report = check_gradients(&[pred, target], |tape, v| {
            let _ = tape;
            mse(v[0], v[1])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn uniform_cross_entropy_is_log_k() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(IxDyn(&[5, 3])));
        let l = cross_entropy(z, &[0, 1, 2, 0, 1]).unwrap().item();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(z, &[0, 1, 3, 0, 1]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn zero_logits_bce_is_ln2() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(IxDyn(&[4, 4])));
        let y = Tensor::from_shape_fn(IxDyn(&[4, 4]), |ix| ((ix[0] + ix[1]) % 2) as f64);
        let l = bce_with_logits(z, &y).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_detected() {
        let mut t = Tensor::ones(IxDyn(&[3, 2]));
        t[[1, 0]] = 0.0;
        t[[1, 1]] = 0.0;
        assert!(matches!(check_rows_nonzero(&t), Err(Error::ZeroNormRow(1))));
    }
}
