use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PruneMask;
use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// One bias-corrected Adam update from the gradients held by `model`.
    ///
    /// Elements whose mask bit is 0 are forced to 0 together with both
    /// moment estimates, whatever gradient reached them.
    pub fn step(&mut self, model: &mut Model, config: &AdamConfig, mask: Option<&PruneMask>) -> Result<()> {
        if self.m.len() != model.params().len()
            || self.m.iter().zip(model.params()).any(|(m, p)| m.len() != p.tensor.len())
        {
            return Err(Error::Dimension("optimizer state does not match the model".into()));
        }
        let keep: Vec<Option<&[bool]>> = match mask {
            Some(mask) => model.params().iter().map(|p| mask.bits(&p.path)).collect(),
            None => vec![None; model.params().len()],
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let grad = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.tensor.len()],
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = p.tensor.values_mut();
            for j in 0..values.len() {
                if let Some(bits) = keep[i] {
                    if !bits[j] {
                        values[j] = 0.0;
                        m[j] = 0.0;
                        v[j] = 0.0;
                        continue;
                    }
                }
                let g = grad[j];
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}
