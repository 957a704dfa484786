//! Adam, gradient clipping and the step-halving learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("adam.{name}"), format!("{v} is outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One bias-corrected update of every parameter that has a gradient.
    /// Non-finite gradients abort the step before anything changes.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::TensorShape { name: name.clone(), expected: p.shape().to_vec(), found: g.shape().to_vec() });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p[i] = T::lit(p[i].as_f64() - step);
            }
        }
        Ok(())
    }

    /// Store moments as `{prefix}.m.{name}` / `{prefix}.v.{name}`.
    pub fn save(&self, prefix: &str, bundle: &mut Bundle) {
        for (kind, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                bundle.insert(format!("{prefix}.{kind}.{name}"), t.cast());
            }
        }
    }

    pub fn load(config: AdamConfig, step: u64, prefix: &str, bundle: &Bundle) -> Self {
        let mut out = Self::new(config);
        out.step = step;
        for (kind, map) in [("m", &mut out.m), ("v", &mut out.v)] {
            let head = format!("{prefix}.{kind}.");
            for (name, t) in bundle.tensors.range(head.clone()..) {
                let Some(rest) = name.strip_prefix(&head) else { break };
                map.insert(rest.to_string(), t.cast());
            }
        }
        out
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data().iter()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_inplace(k);
        }
    }
    norm
}

/// Piecewise-constant rate halved at each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * 0.5f64.powi(halvings as i32)
    }
}
