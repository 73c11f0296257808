//! Finite-difference gradient checking.

use ndarray::Array2;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

/// Absolute floor below which gradient entries are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Largest entrywise |a − n| / max(|a|, |n|, floor).
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

pub fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim(), "gradient shapes differ");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}
