//! Central finite differences and the error measures used to compare them
//! against analytic gradients.

use crate::math::Matrix;

/// Step used for coordinate `x`: `1e-5 · max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// [`central_difference`] over the entries of a matrix.
pub fn central_difference_matrix(m: &Matrix<f64>, mut f: impl FnMut(&Matrix<f64>) -> f64) -> Matrix<f64> {
    let (rows, cols) = m.shape();
    let mut probe = m.clone();
    let grad = central_difference(m.data(), |x| {
        probe.data_mut().copy_from_slice(x);
        f(&probe)
    });
    Matrix::from_vec(rows, cols, grad).expect("same shape as the probe")
}

/// `‖a − b‖_∞ / max(‖b‖_∞, 1e-12)`, with `b` the reference.
pub fn rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "rel_error: length mismatch");
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| b.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

pub fn rel_error_matrix(analytic: &Matrix<f64>, reference: &Matrix<f64>) -> f64 {
    assert_eq!(analytic.shape(), reference.shape(), "rel_error_matrix: shape mismatch");
    rel_error(analytic.data(), reference.data())
}

/// `½‖O‖² + ½‖S‖²`; its upstream gradients are `O` and `S` themselves.
pub fn half_square_loss(outputs: &Matrix<f64>, final_state: &Matrix<f64>) -> f64 {
    0.5 * (outputs.frobenius_sq() + final_state.frobenius_sq())
}
