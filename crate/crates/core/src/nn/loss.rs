//! Task losses. Each returns the mean loss over the batch together with the
//! gradient with respect to the raw model output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Regression outputs are squashed to `[0, REGRESSION_SCALE]`.
pub const REGRESSION_SCALE: f64 = 5.0;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax cross entropy, mean over rows.
pub(crate) fn cross_entropy_with_grad(
    logits: &[f64],
    n_classes: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    if batch == 0 || logits.len() != batch * n_classes {
        return Err(Error::Dimension(format!(
            "{} logits for {batch} labels over {n_classes} classes",
            logits.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * n_classes..(i + 1) * n_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = &mut grad[i * n_classes..(i + 1) * n_classes];
        for (c, gc) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gc = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((total / batch as f64, grad))
}

pub(crate) fn scaled_sigmoid_mse_with_grad(raw: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if raw.len() != targets.len() || raw.is_empty() {
        return Err(Error::Dimension(format!(
            "{} regression outputs for {} targets",
            raw.len(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets
        .iter()
        .find(|&&t| !(0.0..=REGRESSION_SCALE).contains(&t))
    {
        return Err(Error::Validation(format!(
            "regression target {bad} outside [0, {REGRESSION_SCALE}]"
        )));
    }
    let n = raw.len() as f64;
    let mut total = 0.0;
    let grad = raw
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let s = sigmoid(z);
            let diff = REGRESSION_SCALE * s - t;
            total += diff * diff;
            2.0 * diff * REGRESSION_SCALE * s * (1.0 - s) / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean cross entropy of `logits` (batch × classes) against class labels.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let n_classes = match logits.shape() {
        [_, c] => *c,
        other => {
            return Err(Error::Dimension(format!(
                "logits must be rank 2, got shape {other:?}"
            )))
        }
    };
    cross_entropy_with_grad(logits.values(), n_classes, labels).map(|(l, _)| l)
}

/// Mean squared error of `5 * sigmoid(raw)` against targets in `[0, 5]`.
pub fn scaled_sigmoid_regression_loss(raw: &Tensor, targets: &[f64]) -> Result<f64> {
    scaled_sigmoid_mse_with_grad(raw.values(), targets).map(|(l, _)| l)
}

/// Gradient of [`scaled_sigmoid_regression_loss`] with respect to `raw`.
pub fn scaled_sigmoid_regression_grad(raw: &Tensor, targets: &[f64]) -> Result<Vec<f64>> {
    scaled_sigmoid_mse_with_grad(raw.values(), targets).map(|(_, g)| g)
}

/// Predicted score in `[0, 5]` for a raw regressor output.
pub fn regression_prediction(raw: f64) -> f64 {
    REGRESSION_SCALE * sigmoid(raw)
}
