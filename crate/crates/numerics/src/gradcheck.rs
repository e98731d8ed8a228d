//! Finite-difference verification of analytic gradients (64-bit), using the
//! fourth-order central stencil
//! `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. Its O(h^4) truncation
//! error allows a step large enough that round-off stays far below even very
//! small gradients.

use crate::{Array, NumericsError, Result};

/// Scalar objective returning `(value, analytic gradient per tensor)`.
pub trait Objective: Fn(&[Array<f64>]) -> Result<(f64, Vec<Array<f64>>)> {}
impl<F: Fn(&[Array<f64>]) -> Result<(f64, Vec<Array<f64>>)>> Objective for F {}

/// Max over every coordinate of `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F: Objective>(f: F, point: &[Array<f64>], eps: f64) -> Result<f64> {
    grad_check_sampled(f, point, eps, usize::MAX)
}

/// As [`grad_check`], probing at most `per_tensor` evenly spaced coordinates
/// of each tensor.
pub fn grad_check_sampled<F: Objective>(
    f: F,
    point: &[Array<f64>],
    eps: f64,
    per_tensor: usize,
) -> Result<f64> {
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(NumericsError::NonFinite(format!("objective value {value}")));
    }
    compare_gradients(|p| Ok(f(p)?.0), &analytic, point, eps, per_tensor)
}

/// Compares precomputed `analytic` gradients at `point` with finite
/// differences of `value`, which need not compute any gradient itself.
pub fn compare_gradients(
    value: impl Fn(&[Array<f64>]) -> Result<f64>,
    analytic: &[Array<f64>],
    point: &[Array<f64>],
    eps: f64,
    per_tensor: usize,
) -> Result<f64> {
    if analytic.len() != point.len() {
        return Err(NumericsError::Shape(format!(
            "{} gradients for {} tensors",
            analytic.len(),
            point.len()
        )));
    }
    let mut work: Vec<Array<f64>> = point.to_vec();
    let mut worst = 0.0f64;
    for (ti, tensor) in point.iter().enumerate() {
        if analytic[ti].shape() != tensor.shape() {
            return Err(NumericsError::Shape(format!(
                "gradient {:?} vs tensor {:?}",
                analytic[ti].shape(),
                tensor.shape()
            )));
        }
        let n = tensor.len();
        let count = per_tensor.min(n);
        for s in 0..count {
            let i = if count == n { s } else { s * n / count };
            let orig = tensor.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work[ti].data_mut()[i] = orig + offset;
                value(&work)
            };
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work[ti].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[ti].data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(NumericsError::NonFinite(format!(
                    "tensor {ti} coord {i}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
