//! Finite-difference gradient verification.
//!
//! The checker is deliberately independent of the tape: it only evaluates a
//! scalar function at perturbed inputs and compares central differences
//! against a caller-supplied analytic gradient. Every differentiable op in
//! the crate is validated this way at build time of its tests.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor2;

pub const GRAD_CHECK_EPS_MIN: f64 = 1e-6;
pub const GRAD_CHECK_EPS_MAX: f64 = 1e-3;

/// Max over coordinates of `|analytic - central| / max(1, |analytic|,
/// |central|)` where `central = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn gradient_check(
    f: &dyn Fn(&Tensor2) -> Result<f64>,
    analytic_grad: &dyn Fn(&Tensor2) -> Result<Tensor2>,
    x: &Tensor2,
    eps: f64,
) -> Result<f64> {
    if !(GRAD_CHECK_EPS_MIN..=GRAD_CHECK_EPS_MAX).contains(&eps) {
        return Err(Error::Contract(format!(
            "gradient_check eps {eps:e} outside [{GRAD_CHECK_EPS_MIN:e}, {GRAD_CHECK_EPS_MAX:e}]"
        )));
    }
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("gradient_check f(x)".into()));
    }
    let analytic = analytic_grad(x)?;
    analytic.same_shape(x, "gradient_check analytic gradient")?;

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = x.get(r, c);
            xp.set(r, c, orig + eps);
            let fp = f(&xp)?;
            xp.set(r, c, orig - eps);
            let fm = f(&xp)?;
            xp.set(r, c, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient_check f at perturbed ({r},{c})"
                )));
            }
            let central = (fp - fm) / (2.0 * eps);
            let a = analytic.get(r, c);
            let rel = (a - central).abs() / 1.0f64.max(a.abs()).max(central.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Convenience wrapper: `build` maps a leaf to a scalar output on a fresh
/// tape; the analytic gradient comes from the tape's backward pass.
pub fn gradient_check_tape(
    build: &dyn Fn(&mut Tape, Var) -> Var,
    x: &Tensor2,
    eps: f64,
) -> Result<f64> {
    let f = |input: &Tensor2| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(input.clone());
        let out = build(&mut tape, leaf);
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient_check_tape build must produce a 1x1 scalar, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.get(0, 0))
    };
    let grad = |input: &Tensor2| -> Result<Tensor2> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(input.clone());
        let out = build(&mut tape, leaf);
        let mut grads = tape.backward(out);
        Ok(grads
            .take(leaf)
            .unwrap_or_else(|| Tensor2::zeros(input.rows(), input.cols())))
    };
    gradient_check(&f, &grad, x, eps)
}
