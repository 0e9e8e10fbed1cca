use ndarray::Array1;

use crate::error::{Error, Result};

/// Softmax cross-entropy of `logits` against `label`; returns the loss and
/// its gradient `softmax(logits) - onehot(label)`.
pub fn classification_loss(logits: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::Label { label, classes });
    }
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted = logits.mapv(|v| v - max);
    let log_sum = shifted.mapv(f64::exp).sum().ln();
    let loss = log_sum - shifted[label];
    let mut grad = shifted.mapv(|v| (v - log_sum).exp());
    grad[label] -= 1.0;
    Ok((loss, grad))
}
