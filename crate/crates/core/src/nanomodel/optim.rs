use serde::{Deserialize, Serialize};

use super::backward::Gradients;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Applies one update with learning rate `lr` (overrides `cfg.lr` so callers can schedule it).
    /// Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut [f64], grads: &Gradients, cfg: &AdamConfig, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.0.len() != self.m.len() {
            return Err(Error::data("optimizer state, parameters and gradients differ in length"));
        }
        if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient {} at parameter {i}", grads.0[i])));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}
