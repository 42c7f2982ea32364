//! Central-difference gradient oracle.

use crate::matrix::Matrix;

/// Denominator floor for [`relative_error`], so entries whose true gradient
/// is zero are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h` for every entry of `x`.
pub fn finite_diff_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix, step: f64) -> Matrix {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + step;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - step;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest entry-wise `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}
