use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use twingan_autograd::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the per-parameter step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Drops moments for parameters that no longer exist.
    pub fn retain_existing(&mut self, params: &ParamStore) {
        self.slots.retain(|name, _| params.contains(name));
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            slot.steps += 1;
            let t = slot.steps as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
