use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.1, clip_norm: Some(0.2) }
    }
}

/// AdamW with decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub applied_norm: f64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self { config, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    /// Applies one update. A non-finite gradient leaves both state and params untouched.
    pub fn step(&mut self, params: &mut ModelParams, grad: &[f64]) -> Result<StepStats> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "gradient {} / optimizer {} / params {}",
                grad.len(),
                self.m.len(),
                params.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        let c = self.config;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match c.clip_norm {
            Some(clip) if grad_norm > clip => clip / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.data.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g * scale;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            *p -= c.lr * (update + c.weight_decay * *p);
        }
        Ok(StepStats { grad_norm, applied_norm: grad_norm * scale })
    }
}
