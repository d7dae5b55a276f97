//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> AdamW {
        AdamW {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    /// Updates `params` in place. `decay[i]` selects which entries get weight
    /// decay; `frozen[i]` entries are left untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay: &[bool], frozen: &[bool]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if decay[i] {
                params[i] -= c.learning_rate * c.weight_decay * params[i];
            }
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
}
