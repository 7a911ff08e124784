//! AdamW: Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    /// One zeroed moment pair per parameter, sized like `shapes`.
    pub fn new(config: AdamConfig, lens: impl IntoIterator<Item = usize>) -> Self {
        Self {
            config,
            step: 0,
            moments: lens.into_iter().map(Moments::zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per update before [`Self::update`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates parameter `slot` in place with gradient `grad` at learning rate `lr`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &[f64], lr: f64) -> Result<()> {
        let AdamConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.config;
        let mom = self.moments.get_mut(slot).ok_or_else(|| Error::Contract(format!("no optimizer slot {slot}")))?;
        if grad.len() != param.len() || mom.m.len() != param.len() {
            return Err(Error::Dimension(format!(
                "adam: parameter {:?} with gradient of length {} and state of length {}",
                param.shape(),
                grad.len(),
                mom.m.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::Contract("adam update before begin_step".into()));
        }
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut mom.m).zip(&mut mom.v) {
            *p -= lr * weight_decay * *p;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Convenience for a single tensor: one step on `params` with `grads`.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!("adam: {} parameters but {} gradients", params.len(), grads.len())));
    }
    state.begin_step();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(i, p, g, lr)?;
    }
    Ok(())
}
