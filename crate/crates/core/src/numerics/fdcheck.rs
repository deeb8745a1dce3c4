//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::Real;

/// Coordinates whose gradient is below this fraction of the largest
/// finite-difference component are compared against that fraction instead
/// of their own magnitude.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Central differences `(f(x+h e_i) − f(x−h e_i)) / 2h` for every coordinate.
pub fn central_difference<T: Real>(f: &dyn Fn(&[T]) -> T, x: &[T], step: T) -> Vec<T> {
    try_central_difference(f, x, step).unwrap_or_else(|_| vec![T::lit(f64::NAN); x.len()])
}

fn try_central_difference<T: Real>(f: &dyn Fn(&[T]) -> T, x: &[T], step: T) -> Result<Vec<T>> {
    let mut xp = x.to_vec();
    let two_h = step + step;
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + step;
            let fp = f(&xp);
            xp[i] = orig - step;
            let fm = f(&xp);
            xp[i] = orig;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFiniteFunction(i));
            }
            Ok((fp - fm) / two_h)
        })
        .collect()
}

/// Max relative error between an analytic gradient and central differences.
///
/// The relative error at coordinate `i` is
/// `|g_i − d_i| / max(|g_i|, |d_i|, SCALE_FLOOR·max_j |d_j|)`.
pub fn fd_check<T: Real>(f: &dyn Fn(&[T]) -> T, grad: &[T], x: &[T], step: T) -> Result<T> {
    if grad.len() != x.len() {
        return Err(Error::InvalidDimension(format!(
            "gradient has {} entries, point has {}",
            grad.len(),
            x.len()
        )));
    }
    if !f(x).is_finite() {
        return Err(Error::NonFiniteFunction(usize::MAX));
    }
    let fd = try_central_difference(f, x, step)?;
    let scale = fd.iter().fold(T::zero(), |m, d| m.max(d.abs())) * T::lit(SCALE_FLOOR);
    let tiny = T::lit(1e-300_f64.max(f64::MIN_POSITIVE));
    Ok(grad
        .iter()
        .zip(&fd)
        .map(|(&g, &d)| {
            let denom = g.abs().max(d.abs()).max(scale).max(tiny);
            (g - d).abs() / denom
        })
        .fold(T::zero(), |m, e| m.max(e)))
}

/// [`fd_check`] for a function that returns its value and gradient together.
pub fn fd_check_with<T: Real>(
    value_and_grad: &dyn Fn(&[T]) -> (T, Vec<T>),
    x: &[T],
    step: T,
) -> Result<T> {
    let (_, g) = value_and_grad(x);
    let f = |v: &[T]| value_and_grad(v).0;
    fd_check(&f, &g, x, step)
}
