//! Finite-difference utilities used by the test suites to validate gradients.
//!
//! Nothing here knows about the tape's backward pass: a gradient is estimated
//! purely by re-evaluating a loss closure at perturbed inputs, which keeps
//! this an independent oracle for it.

use crate::autograd::Real;

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[Real], step: Real) -> Vec<Real>
where
    F: FnMut(&[Real]) -> Real,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error |a−b| / max(1, |a|, |b|), the metric all gradient checks
/// quote. The 1 in the denominator keeps near-zero gradients from blowing up
/// the ratio.
pub fn relative_error(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest pairwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, Real::max)
}
