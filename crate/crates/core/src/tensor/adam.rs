use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment buffers are laid out in parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    /// Applies one update from the store's grad buffers. The caller zeroes
    /// the gradients afterwards.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(self.first.len(), store.len(), "optimizer built for a different store");
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            let vals = p.value.data_mut();
            for (((w, &g), mi), vi) in vals.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
