//! Central finite-difference gradient checking.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function `f` at `x` against
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(DiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let y = f(&mut tape, xv)?;
    let mut grads = tape.backward(y)?;
    let analytic = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false)?;
        let out = f(&mut t, v)?;
        t.value(out).item().ok_or_else(|| DiffError::NotScalar {
            shape: t.value(out).shape().to_vec(),
        })
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tol,
        passed: true,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || i == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
