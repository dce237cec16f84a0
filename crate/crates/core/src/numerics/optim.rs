use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimMode {
    AdaptiveMoment,
    /// Weight decay applied multiplicatively, outside the moment estimates.
    DecoupledWeightDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub mode: OptimMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            mode: OptimMode::AdaptiveMoment,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            mode: OptimMode::DecoupledWeightDecay,
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// One bias-corrected adaptive-moment update over every block; gradients
/// are zeroed afterwards.
pub fn optimizer_step(params: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !params.grads_ready() {
        let name = params
            .blocks()
            .first()
            .map(|b| b.name.clone())
            .unwrap_or_else(|| "<empty>".into());
        return Err(Error::MissingGradients(name));
    }
    params.step += 1;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = match cfg.mode {
        OptimMode::DecoupledWeightDecay => cfg.lr * cfg.weight_decay,
        OptimMode::AdaptiveMoment => 0.0,
    };
    for block in params.blocks_mut() {
        let value = block.value.as_mut_slice();
        let grad = block.grad.as_slice();
        let m = block.first_moment.as_mut_slice();
        let v = block.second_moment.as_mut_slice();
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= decay * value[i] + cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    params.zero_grads();
    Ok(())
}
