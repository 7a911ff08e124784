//! Central finite differences, the oracle for every backward rule.

use super::tensor::Tensor;

/// Estimates `∇f(x)` coordinate by coordinate as
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    out
}

/// Largest elementwise relative error between two gradient estimates.
///
/// Each entry is compared relative to `max(|a|, |b|)`, floored at 1e-3 of the
/// largest magnitude in `b` (and at 1e-10 overall) so that entries which are
/// zero up to rounding do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_relative_error_with_floor(analytic, numeric, 0.0)
}

/// As [`max_relative_error`], with an extra absolute floor on the
/// denominator. Used when a tensor's true gradient is zero by symmetry and
/// only differencing noise remains.
pub fn max_relative_error_with_floor(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(abs_floor).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
