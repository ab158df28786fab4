//! Central-difference gradient checking.
//!
//! The checker perturbs one coordinate at a time and re-runs a scalar
//! function, so it is completely independent of the reverse-mode tape.
//! Tests compare tape gradients against it with a mixed tolerance:
//! a disagreement at index i counts only if
//! `|a - n| > abs_tol + rel_tol * max(|a|, |n|)`.

use crate::error::Result;

/// Default step for central differences; loss surfaces here are smooth
/// and O(1)-scaled, where h = 1e-5 gives ~1e-10 truncation error.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// First coordinate where the two gradients disagree beyond tolerance,
/// with both values, or None when they match everywhere.
pub fn grad_mismatch(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = abs_tol + rel_tol * a.abs().max(n.abs());
        if (a - n).abs() > tol {
            return Some((i, a, n));
        }
    }
    None
}
