//! Central finite-difference gradient verification.
//!
//! The numeric side never touches `Tape::backward`, so it stays an
//! independent oracle for the analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare the analytic gradient of `f` at `x` against central finite
/// differences and return the worst relative error
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
///
/// `f` builds a scalar loss on the given tape from the input var; it must be
/// deterministic (dropout in eval mode or with a fixed mask).
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone(), false);
        let loss = f(&mut tape, v)?;
        Ok(tape.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
