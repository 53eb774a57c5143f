//! Central finite-difference validation of analytic gradients.
//!
//! Run in `f64`: the default `f32` storage loses too many digits for the
//! difference quotient to be meaningful.

use crate::error::DiffError;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function at `point`.
pub fn central_diff_grad<F>(
    f: &mut F,
    point: &Tensor<f64>,
    eps: f64,
) -> Result<Tensor<f64>, DiffError>
where
    F: FnMut(&Tensor<f64>) -> Result<f64, DiffError>,
{
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(DiffError::NonFinite(format!(
                "finite-difference evaluation at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient against central differences of `f` at
/// `point`, returning the worst relative error.
pub fn grad_check<F>(
    mut f: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> Result<f64, DiffError>
where
    F: FnMut(&Tensor<f64>) -> Result<f64, DiffError>,
{
    let numeric = central_diff_grad(&mut f, point, eps)?;
    Ok(max_rel_err(analytic, &numeric))
}
