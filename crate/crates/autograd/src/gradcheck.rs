//! Central finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all checked scalars of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Per-parameter maximum; `None` for frozen parameters, which are skipped.
    pub per_param: Vec<Option<f64>>,
    pub scalars_checked: usize,
}

/// Compares the tape gradient of `f` with central differences.
///
/// `f` receives a fresh tape and one bound [`Var`] per entry of `params`
/// (trainable iff the tensor's `requires_grad` is set) and must return a
/// scalar loss. Only trainable parameters are perturbed and reported.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, loss)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();
    drop(tape);

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error: f64 = 0.0;
    let mut scalars_checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        if !params[pi].requires_grad {
            per_param.push(None);
            continue;
        }
        let mut worst: f64 = 0.0;
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = evaluate(&f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
            scalars_checked += 1;
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push(Some(worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        scalars_checked,
    })
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    scalar_of(&tape, loss)
}

fn scalar_of(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(TensorError::Usage(format!(
            "loss must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![3.0, 4.0]).trainable();
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.5))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-9, "{report:?}");
        assert_eq!(report.scalars_checked, 2);
    }

    #[test]
    fn frozen_tensors_are_excluded() {
        let x = Tensor::vector(vec![1.0, -2.0]).trainable();
        let frozen = Tensor::vector(vec![0.5, 0.25]);
        let report = grad_check(
            |tape, v| {
                let p = tape.mul(v[0], v[1])?;
                Ok(tape.sum(p))
            },
            &[x, frozen],
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.per_param[1], None);
        assert_eq!(report.scalars_checked, 2);
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let x = Tensor::vector(vec![1.0]).trainable();
        let err = grad_check(
            |tape, v| {
                calls.set(calls.get() + 1);
                let s = tape.sum(v[0]);
                Ok(tape.scale(s, calls.get() as f64))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Oracle(_)));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::vector(vec![1.0]).trainable();
        assert!(grad_check(|tape, v| Ok(tape.sum(v[0])), &[x], 0.0).is_err());
    }
}
