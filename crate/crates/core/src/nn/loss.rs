use super::matrix::Matrix;
use crate::error::{ensure, Error, Result};

/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over every entry, with soft targets allowed.
///
/// Returns the loss and its gradient with respect to `pred`. The gradient is
/// evaluated at the clamped prediction, so saturated outputs still receive a
/// bounded push in the right direction.
pub fn bce_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    ensure!(
        pred.shape() == target.shape(),
        Shape,
        "bce: prediction {:?} vs target {:?}",
        pred.shape(),
        target.shape()
    );
    let n = pred.as_slice().len();
    ensure!(n > 0, Shape, "bce: empty input");
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&p, &t) in pred.as_slice().iter().zip(target.as_slice()) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        grad.push((p - t) / (p * (1.0 - p)) * inv_n);
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("bce loss".into()));
    }
    Ok((loss, Matrix::from_raw(pred.rows(), pred.cols(), grad)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rowwise(e: &Matrix) -> Result<Matrix> {
    e.ensure_finite("softmax input")?;
    let mut out = e.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Gradient with respect to the logits given `alpha = softmax(e)` and the
/// gradient with respect to `alpha`.
pub fn softmax_backward(alpha: &Matrix, d_alpha: &Matrix) -> Matrix {
    debug_assert_eq!(alpha.shape(), d_alpha.shape());
    let mut out = Matrix::zeros(alpha.rows(), alpha.cols());
    for r in 0..alpha.rows() {
        let a = alpha.row(r);
        let da = d_alpha.row(r);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for (o, (ai, dai)) in out.row_mut(r).iter_mut().zip(a.iter().zip(da)) {
            *o = ai * (dai - inner);
        }
    }
    out
}
