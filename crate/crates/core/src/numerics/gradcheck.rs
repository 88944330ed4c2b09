use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for relative gradient errors. Entries smaller than this
/// are compared absolutely at `tol * floor`, which stays well above the
/// `~1e-11` roundoff of a central difference with `eps = 1e-5`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference objective"));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}
