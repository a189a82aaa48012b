//! AdamW with global-norm clipping and a linear-to-zero schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DopError, Result};
use crate::tensor::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// Learning rate at `step` of `total`: `lr0 · (1 − step/total)`, reaching
/// zero at `step == total`.
pub fn linear_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    lr0 * (1.0 - (step as f64 / total as f64).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names of every parameter holding optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update of every trainable tensor in `sets` from its accumulated
    /// gradient. Returns the global gradient norm before clipping.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], lr: f64) -> Result<f64> {
        let mut sq = 0.0;
        for set in sets.iter() {
            for (name, t) in set.iter() {
                if !t.requires_grad() {
                    continue;
                }
                let g = t
                    .grad()
                    .ok_or_else(|| DopError::contract(format!("parameter {name} has no gradient")))?;
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(DopError::NonFinite(format!("gradient norm {norm}")));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        for set in sets.iter_mut() {
            for (name, p) in set.iter_mut() {
                if !p.requires_grad() {
                    continue;
                }
                let g: Vec<f64> = p.grad().expect("checked above").iter().map(|x| x * scale).collect();
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let values = p.values_mut();
                for i in 0..g.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    values[i] -= lr * (update + weight_decay * values[i]);
                }
            }
        }
        Ok(norm)
    }
}
