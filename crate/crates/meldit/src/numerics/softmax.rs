//! Row softmax with an additive bias whose entries may be `-inf`.
//!
//! `-inf` bias marks positions that must receive exactly zero probability.
//! Internally the mask is folded in as a large negative finite sentinel so
//! downstream gradients stay finite, and exact zeros are enforced on the
//! output afterwards. A fully masked row cannot be normalized; it falls back
//! to the uniform distribution and emits a diagnostic warning.

use crate::error::{Error, Result};

use super::tensor::Tensor2;

/// Finite stand-in for `-inf` inside logits. exp(sentinel + x) underflows to
/// exactly 0.0 for any realistic logit x, so masked positions contribute
/// nothing even before the explicit post-masking.
pub const MASK_SENTINEL: f64 = -1e9;

/// `softmax(logits + bias)` per row.
///
/// Finite bias entries shift logits; `-inf` entries force exact zeros. Rows
/// where every position is masked become uniform (with a warning).
pub fn softmax_with_bias(logits: &Tensor2, bias: &Tensor2) -> Result<Tensor2> {
    logits.same_shape(bias, "softmax_with_bias")?;
    let (rows, cols) = logits.shape();
    if cols == 0 {
        return Err(Error::Contract("softmax over zero columns".into()));
    }
    let mut out = Tensor2::zeros(rows, cols);
    let mut uniform_rows = 0usize;
    for r in 0..rows {
        let lrow = logits.row(r);
        let brow = bias.row(r);
        let orow = out.row_mut(r);
        softmax_row(lrow, brow, orow, &mut uniform_rows);
    }
    if uniform_rows > 0 {
        log::warn!("softmax_with_bias: {uniform_rows} fully masked row(s) fell back to uniform");
    }
    Ok(out)
}

/// Core row kernel shared with the autodiff op. Returns whether the row was
/// fully masked (uniform fallback).
pub(crate) fn softmax_row(
    logits: &[f64],
    bias: &[f64],
    out: &mut [f64],
    uniform_rows: &mut usize,
) -> bool {
    let cols = logits.len();
    let mut max = f64::NEG_INFINITY;
    let mut any_allowed = false;
    for (&l, &b) in logits.iter().zip(bias) {
        if masked(b) {
            continue;
        }
        any_allowed = true;
        let v = l + b;
        if v > max {
            max = v;
        }
    }
    if !any_allowed {
        let u = 1.0 / cols as f64;
        out.fill(u);
        *uniform_rows += 1;
        return true;
    }
    let mut sum = 0.0;
    for ((o, &l), &b) in out.iter_mut().zip(logits).zip(bias) {
        let shifted = if masked(b) {
            MASK_SENTINEL
        } else {
            l + b - max
        };
        let e = shifted.exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for (o, &b) in out.iter_mut().zip(bias) {
        // Post-mask: exact zero regardless of what exp produced.
        *o = if masked(b) { 0.0 } else { *o * inv };
    }
    false
}

#[inline]
pub(crate) fn masked(bias: f64) -> bool {
    bias == f64::NEG_INFINITY || bias <= MASK_SENTINEL
}

#[cfg(test)]
mod tests {
    use super::*;

    const NEG_INF: f64 = f64::NEG_INFINITY;

    #[test]
    fn matches_hand_computed_two_allowed_case() {
        // logits [2, 1, 0] with the third position masked:
        // p = [e/(e+1), 1/(e+1), 0].
        let logits = Tensor2::new(1, 3, vec![2.0, 1.0, 0.0]).unwrap();
        let mut bias = Tensor2::zeros(1, 3);
        bias.set(0, 2, NEG_INF);
        let p = softmax_with_bias(&logits, &bias).unwrap();
        let e = std::f64::consts::E;
        assert!((p.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert_eq!(p.get(0, 2), 0.0);
        assert!((p.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((p.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn rows_sum_to_one_and_masked_positions_are_exact_zero() {
        let logits = Tensor2::from_fn(6, 7, |r, c| ((r * 13 + c * 5) % 11) as f64 - 5.0);
        let bias = Tensor2::from_fn(6, 7, |r, c| if (r + c) % 3 == 0 { NEG_INF } else { 0.0 });
        let p = softmax_with_bias(&logits, &bias).unwrap();
        for r in 0..6 {
            let sum: f64 = p.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            for c in 0..7 {
                if (r + c) % 3 == 0 {
                    assert_eq!(p.get(r, c), 0.0);
                } else {
                    assert!(p.get(r, c) > 0.0);
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_falls_back_to_uniform() {
        let logits = Tensor2::new(2, 4, vec![5.0, -3.0, 0.0, 1.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let bias = Tensor2::from_fn(2, 4, |r, _| if r == 0 { NEG_INF } else { 0.0 });
        let p = softmax_with_bias(&logits, &bias).unwrap();
        for c in 0..4 {
            assert_eq!(p.get(0, c), 0.25);
            assert_eq!(p.get(1, c), 0.25);
        }
    }

    #[test]
    fn huge_allowed_logits_stay_finite() {
        let logits = Tensor2::new(1, 3, vec![800.0, 700.0, 0.0]).unwrap();
        let mut bias = Tensor2::zeros(1, 3);
        bias.set(0, 2, NEG_INF);
        let p = softmax_with_bias(&logits, &bias).unwrap();
        assert!(p.all_finite());
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p.get(0, 2), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let logits = Tensor2::zeros(2, 3);
        let bias = Tensor2::zeros(3, 2);
        assert!(softmax_with_bias(&logits, &bias).is_err());
    }

    #[test]
    fn finite_bias_entries_shift_logits() {
        let logits = Tensor2::new(1, 2, vec![1.0, 2.0]).unwrap();
        let bias = Tensor2::new(1, 2, vec![1.0, 0.0]).unwrap();
        let p = softmax_with_bias(&logits, &bias).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((p.get(0, 1) - 0.5).abs() < 1e-12);
    }
}
