//! Adam with bias correction and per-group step counters.
//!
//! Moments live alongside the parameters and are checkpointed with them.
//! Each layer group advances its own step count only while trainable, so a
//! group unfrozen mid-run starts from fresh moments and full bias
//! correction instead of inheriting a stale schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::encoder::ParamSet;
use super::{LayerGroup, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl AdamConfig {
    /// Defaults with the given constant learning rate: beta1 0.9,
    /// beta2 0.999, epsilon 1e-8, no weight decay, no warmup.
    pub fn with_learning_rate(learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub(crate) struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub group_steps: BTreeMap<LayerGroup, u64>,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> AdamState {
        AdamState {
            m: ParamSet::zeros(cfg),
            v: ParamSet::zeros(cfg),
            group_steps: BTreeMap::new(),
        }
    }

    /// One Adam step over the trainable groups only. Frozen tensors keep
    /// their parameters, moments, and step counts untouched.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        trainable: &BTreeSet<LayerGroup>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for group in trainable {
            *self.group_steps.entry(*group).or_insert(0) += 1;
        }
        {
            let mut p_tensors = params.tensors_mut();
            let g_tensors = grads.tensors();
            let mut m_tensors = self.m.tensors_mut();
            let mut v_tensors = self.v.tensors_mut();
            for (((p, g), m), v) in p_tensors
                .iter_mut()
                .zip(&g_tensors)
                .zip(m_tensors.iter_mut())
                .zip(v_tensors.iter_mut())
            {
                debug_assert_eq!(p.key, g.key);
                if !trainable.contains(&p.key.group) {
                    continue;
                }
                let t = self.group_steps[&p.key.group];
                let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(t as i32);
                for i in 0..p.data.len() {
                    let grad = g.data[i];
                    let mi = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * grad;
                    let vi = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * grad * grad;
                    m.data[i] = mi;
                    v.data[i] = vi;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    p.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
        }
        for tensor in params.tensors() {
            if trainable.contains(&tensor.key.group) && tensor.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite parameter after update in {}",
                    tensor.key_string()
                )));
            }
        }
        Ok(())
    }
}
