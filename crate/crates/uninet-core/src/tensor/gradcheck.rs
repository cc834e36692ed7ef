//! Central finite-difference helpers for verifying analytic gradients.

use super::Tensor;

/// Relative error with a small absolute floor so near-zero pairs compare
/// sanely. Pairs where both sides sit below finite-difference resolution
/// (~1e-8 for f values of order 1) count as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a.abs() < 1e-8 && b.abs() < 1e-8 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check the analytic gradient of `f` (which returns the scalar value and
/// its gradient w.r.t. the input tensor) against central differences at the
/// listed coordinates. Returns the worst relative error.
pub fn check_coords(
    f: &dyn Fn(&Tensor) -> (f64, Tensor),
    x0: &Tensor,
    coords: &[usize],
) -> f64 {
    let (_, grad) = f(x0);
    assert_eq!(grad.shape(), x0.shape());
    let mut worst: f64 = 0.0;
    for &i in coords {
        let h = 1e-5 * x0.data()[i].abs().max(1.0);
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
        worst = worst.max(rel_err(grad.data()[i], fd));
    }
    worst
}

/// Directional-derivative check: compares <grad, dir> against a central
/// difference of `f` along `dir`. Exercises every coordinate at once.
pub fn check_direction(
    f: &dyn Fn(&Tensor) -> (f64, Tensor),
    x0: &Tensor,
    dir: &Tensor,
) -> f64 {
    assert_eq!(dir.shape(), x0.shape());
    let (_, grad) = f(x0);
    let analytic: f64 = grad.data().iter().zip(dir.data().iter()).map(|(g, d)| g * d).sum();
    let h = 1e-6;
    let xp = x0.axpy(h, dir);
    let xm = x0.axpy(-h, dir);
    let fd = (f(&xp).0 - f(&xm).0) / (2.0 * h);
    rel_err(analytic, fd)
}
