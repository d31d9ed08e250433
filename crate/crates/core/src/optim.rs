//! Adaptive-moment gradient optimizer over named network parameters.
//!
//! State is keyed per parameter tensor and created lazily on the first
//! gradient a parameter receives, so in instance-norm-only mode the state
//! map simply never contains a convolution entry. Bias correction uses a
//! per-parameter step count: a parameter untouched by the drawn sub-loss
//! keeps its moments and timestep unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stylenet::{ParamKey, StyleNetworkPair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::validation(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<ParamKey, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Parameters that have received at least one update.
    pub fn tracked_keys(&self) -> Vec<ParamKey> {
        self.state.keys().copied().collect()
    }

    /// Applies one update to every (key, gradient) pair.
    pub fn step(&mut self, pair: &mut StyleNetworkPair<f32>, grads: &[(ParamKey, Tensor<f32>)]) {
        for (key, grad) in grads {
            let param = pair.param_mut(*key);
            debug_assert_eq!(param.shape(), grad.shape(), "{key:?}");
            let n = param.len();
            let entry = self.state.entry(*key).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            entry.t += 1;
            let bc1 = 1.0 - self.cfg.beta1.powi(entry.t as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(entry.t as i32);
            for i in 0..n {
                let g = grad.data()[i] as f64;
                entry.m[i] = self.cfg.beta1 * entry.m[i] + (1.0 - self.cfg.beta1) * g;
                entry.v[i] = self.cfg.beta2 * entry.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = entry.m[i] / bc1;
                let v_hat = entry.v[i] / bc2;
                let update = self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
                let p = &mut param.data_mut()[i];
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}
