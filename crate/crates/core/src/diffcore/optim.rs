use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }
}

/// Optimizer with per-parameter state. Frozen parameters are skipped.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let entry = store
                .entry(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if entry.tensor.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    entry.tensor.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads.iter() {
                    if store.is_frozen(name) {
                        continue;
                    }
                    let p = store.get_mut(name).expect("checked above");
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= c.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - c.beta1.powi(self.step as i32);
                let bc2 = 1.0 - c.beta2.powi(self.step as i32);
                for (name, g) in grads.iter() {
                    if store.is_frozen(name) {
                        continue;
                    }
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    let p = store.get_mut(name).expect("checked above");
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                        *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
