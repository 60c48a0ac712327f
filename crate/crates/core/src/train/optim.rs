//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::net::model::Model;
use crate::net::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers follow the model's parameter visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients.
    pub fn step<S: Scalar>(&mut self, model: &mut Model<S>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let corr1 = 1.0 - c.beta1.powi(t);
        let corr2 = 1.0 - c.beta2.powi(t);
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params(&mut |_, p| {
            if first.len() <= idx {
                first.push(vec![0.0; p.value.len()]);
                second.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            for k in 0..p.value.len() {
                let g = p.grad[k].as_f64();
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let update = c.learning_rate * (m[k] / corr1) / ((v[k] / corr2).sqrt() + c.eps);
                p.value[k] -= S::of(update);
            }
            idx += 1;
        });
    }
}
