use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Probabilities are clipped into `[BCE_CLIP, 1 − BCE_CLIP]` before taking logs.
pub const BCE_CLIP: f64 = 1e-7;

/// Mean squared error over all entries and its gradient with respect to `x_hat`.
pub fn mse(x: &Matrix, x_hat: &Matrix) -> Result<(f64, Matrix)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            op: "mse",
            left: x.shape(),
            right: x_hat.shape(),
        });
    }
    let n = x.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = b - a;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, Matrix::new(x.rows(), x.cols(), grad)?))
}

/// Mean binary cross-entropy and its gradient with respect to `p`.
///
/// The gradient is zero where clipping was active.
pub fn bce(p: &Matrix, y: &Matrix) -> Result<(f64, Matrix)> {
    if p.shape() != y.shape() {
        return Err(Error::Shape {
            op: "bce",
            left: p.shape(),
            right: y.shape(),
        });
    }
    if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("label {v} is not 0 or 1")));
    }
    let n = p.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p_raw, &y)| {
            let p = p_raw.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            if p != p_raw {
                0.0
            } else {
                (-y / p + (1.0 - y) / (1.0 - p)) / n
            }
        })
        .collect();
    Ok((sum / n, Matrix::new(p.rows(), p.cols(), grad)?))
}
