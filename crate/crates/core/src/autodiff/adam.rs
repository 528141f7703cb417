use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};
use crate::error::OptimError;
use crate::tensor::Scalar;

/// Optimizer hyperparameters with a step-decayed learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_factor: 0.9,
            decay_every: 5,
        }
    }
}

impl AdamConfig {
    /// `lr * decay_factor ^ floor(epoch / decay_every)`
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let periods = if self.decay_every == 0 {
            0
        } else {
            epoch / self.decay_every
        };
        self.lr * self.decay_factor.powi(periods as i32)
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter that has a gradient, using the
    /// learning rate in effect at `epoch`. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        epoch: usize,
    ) -> Result<(), OptimError> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| OptimError::UnknownParam(name.to_string()))?;
            if p.shape() != g.shape() {
                return Err(OptimError::GradientShape {
                    param: name.to_string(),
                    grad: g.shape().to_vec(),
                    param_shape: p.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let correction1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let correction2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.effective_lr(epoch));
        let eps = T::from_f64_lossy(c.epsilon);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    first: vec![T::zero(); g.numel()],
                    second: vec![T::zero(); g.numel()],
                });
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / correction1;
                let v_hat = *vi / correction2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
