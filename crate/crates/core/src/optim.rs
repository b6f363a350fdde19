//! Adam optimizer over named parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moment accumulators plus the
/// global step counter used for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to every named parameter.
    /// Every parameter must have a gradient entry; gradients that are
    /// mathematically zero must be passed as zero-filled vectors.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bias1 = 1.0 - beta1.powi(t as i32);
        let bias2 = 1.0 - beta2.powi(t as i32);
        for (name, tensor) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Numeric(format!("missing gradient for parameter '{name}'")))?;
            let data = tensor.data_mut();
            if grad.len() != data.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient for '{}' has {} values, parameter has {}", name, grad.len(), data.len()),
                ));
            }
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| Slot { m: vec![0.0; data.len()], v: vec![0.0; data.len()] });
            if slot.m.len() != data.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("moment buffers for '{name}' do not match the parameter shape"),
                ));
            }
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
