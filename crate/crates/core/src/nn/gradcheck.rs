use crate::error::{Error, Result};
use crate::nn::{Batch, ForwardOptions, Model};

/// Largest model [`finite_diff_check`] will perturb element by element.
pub const FINITE_DIFF_MAX_PARAMS: usize = 50_000;

/// Largest relative disagreement between backprop and central differences,
/// `|a - c| / (|a| + |c| + 1e-12)`, over every parameter element.
pub fn finite_diff_check(model: &mut Model, batch: &Batch, eps: f64) -> Result<f64> {
    let n = model.n_total();
    if n >= FINITE_DIFF_MAX_PARAMS {
        return Err(Error::Size(format!(
            "{n} parameters; finite differences are limited to {FINITE_DIFF_MAX_PARAMS}"
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Argument(format!("step {eps} must be positive")));
    }
    let opts = ForwardOptions::plain();
    model.forward_backward(batch, &opts)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let loss_at = |model: &mut Model| -> Result<f64> {
        model.forward(&batch.inputs, &opts)?;
        let l = model.loss(&batch.targets)?.value;
        Ok(l)
    };

    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        for j in 0..model.params()[p].tensor.len() {
            let original = model.params()[p].tensor.values()[j];
            model.params_mut()[p].tensor.values_mut()[j] = original + eps;
            let up = loss_at(model)?;
            model.params_mut()[p].tensor.values_mut()[j] = original - eps;
            let down = loss_at(model)?;
            model.params_mut()[p].tensor.values_mut()[j] = original;
            let central = (up - down) / (2.0 * eps);
            let a = analytic[p][j];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    model.forward_backward(batch, &opts)?;
    Ok(worst)
}
