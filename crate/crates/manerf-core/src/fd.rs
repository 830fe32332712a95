//! Central finite-difference utilities.
//!
//! Used by the test suites and the `selftest` command to verify analytic
//! gradients against an independent numerical route. Kept separate from the
//! tape so the check cannot share code with what it checks.

use alloc::vec::Vec;

/// Central difference gradient of a scalar function at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest relative error between two gradient vectors, with the
/// denominator floored at 1 so near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs()).max(1.0);
        let err = (a - n).abs() / scale;
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x
        let x = [1.0, -2.0, 3.0];
        let g = central_diff(|v| v.iter().map(|x| x * x).sum(), &x, 1e-5);
        assert!(max_rel_error(&g, &[2.0, -4.0, 6.0]) < 1e-9);
    }
}
