//! AdamW: Adam moments with weight decay applied to the weights directly.
//!
//! ```text
//! θ ← θ · (1 − lr·λ)                 only for tensors marked `decays`
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − lr · m̂ / (√v̂ + ε)          m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use super::network::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

impl AdamW {
    pub fn new(config: AdamWConfig, like: &Weights) -> Self {
        AdamW {
            config,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// Applies one update at learning rate `lr` (the schedule may differ from
    /// `config.lr`).
    pub fn step(&mut self, weights: &mut Weights, grads: &Weights, lr: f64) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let params = weights.tensors_mut();
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            let shrink = if p.decays {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            for (((w, &g), m), v) in p.data.iter_mut().zip(g.data).zip(m.data).zip(v.data) {
                *w *= shrink;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}
