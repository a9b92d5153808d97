//! AdamW with decoupled weight decay and the linear learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

/// AdamW state over one flat parameter vector.
///
/// Weight decay is decoupled (applied directly to parameters, not through the
/// moment estimates) and defaults to zero, which makes the update identical
/// to Adam unless decay is requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// One update with the effective rate `lr * lr_factor`.
    ///
    /// A non-finite gradient entry rejects the whole step and leaves both the
    /// parameters and the moment estimates untouched.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], lr_factor: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(AceError::NumericalFailure { op: "adamw" });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr_eff = self.lr * lr_factor;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr_eff * self.weight_decay * params[i];
            params[i] -= lr_eff * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Linearly interpolated learning-rate factor over a fixed horizon, constant
/// at `end_factor` afterwards.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LinearLrSchedule {
    pub start_factor: f64,
    pub end_factor: f64,
    pub total_steps: u64,
}

impl LinearLrSchedule {
    pub fn constant() -> Self {
        LinearLrSchedule {
            start_factor: 1.0,
            end_factor: 1.0,
            total_steps: 1,
        }
    }

    pub fn factor(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.end_factor;
        }
        let t = step as f64 / self.total_steps as f64;
        self.start_factor + (self.end_factor - self.start_factor) * t
    }
}
