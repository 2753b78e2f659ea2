use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor used by [`relative_error`]. Gradients smaller than this
/// are compared in absolute terms scaled by the floor.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Oracle(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe).map_err(|e| Error::Oracle(format!("coordinate {i}: {e}")))?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe).map_err(|e| Error::Oracle(format!("coordinate {i}: {e}")))?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite evaluation at coordinate {i}"
            )));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(REL_ERR_FLOOR);
    (a - b).abs() / scale
}

/// Largest element-wise [`relative_error`] between two same-shaped tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
