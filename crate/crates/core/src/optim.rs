//! Adam over the flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with a larger L2 norm are rescaled to this norm (0 disables).
    pub max_grad_norm: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam step on a new parameter snapshot; log-std is re-clamped afterwards.
pub fn update(
    params: &PolicyParams,
    grad: &Gradient,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<PolicyParams> {
    if grad.data.len() != params.data.len() || state.m.len() != params.data.len() {
        return Err(Error::Usage("optimizer shapes do not match the parameters".into()));
    }
    if let Some(i) = grad.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!("non-finite gradient at parameter {i}")));
    }
    let norm = grad.norm();
    let scale = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
        cfg.max_grad_norm / norm
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut next = params.clone();
    for i in 0..next.data.len() {
        let g = grad.data[i] * scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        next.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    next.clamp_log_std();
    Ok(next)
}
