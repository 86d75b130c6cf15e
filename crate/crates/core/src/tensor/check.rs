//! Central finite-difference utilities for gradient verification.

use super::Arr;

/// Relative error with an absolute floor: values whose magnitudes are both
/// below 1e-6 are treated as matching.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-6 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Worst relative error over two gradient arrays of equal shape.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function at `x`, with a step
/// scaled by each component's magnitude.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Arr) -> f64, x: &Arr, h: f64) -> Arr {
    let mut grad = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = x.as_slice().unwrap()[idx];
        let step = h * orig.abs().max(1.0);
        xp.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}
