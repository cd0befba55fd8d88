//! Central finite differences, used only to cross-check the exact
//! derivatives.

use crate::linalg::Matrix;

/// `∂f/∂x` by central differences with step `h`; rows index outputs.
pub fn jacobian<F>(f: F, x: &[f64], h: f64) -> Matrix
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n_out = f(x).len();
    let mut jac = Matrix::zeros(n_out, x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        for o in 0..n_out {
            jac[(o, i)] = (plus[o] - minus[o]) / (2.0 * h);
        }
    }
    jac
}

/// Gradient of a scalar function by central differences.
pub fn gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries that are zero up to differencing noise from
/// dominating; [`DEFAULT_FLOOR`] is what the crate's own checks use.
pub fn max_relative_error(exact: &[f64], approx: &[f64], floor: f64) -> f64 {
    assert_eq!(exact.len(), approx.len());
    exact
        .iter()
        .zip(approx)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub const DEFAULT_FLOOR: f64 = 1e-3;
