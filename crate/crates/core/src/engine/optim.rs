//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::diffcore::{GradBuffer, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Contract(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter, aligned with the store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && store.iter().zip(self.m.iter().zip(&self.v)).all(|((_, p), (m, v))| m.len() == p.value.len() && v.len() == p.value.len())
    }

    /// One update with learning rate `lr`. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) -> Result<()> {
        if !self.matches(store) {
            return Err(Error::Contract("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
