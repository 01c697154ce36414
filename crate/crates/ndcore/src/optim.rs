use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled (AdamW) decay `w -= lr·weight_decay·w`, applied to matrices
    /// only (row-vector gains and biases are exempt).
    #[serde(default)]
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f32>, Vec<f32>)>,
    no_decay: BTreeSet<ParamId>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
            no_decay: BTreeSet::new(),
        }
    }

    /// Excludes `ids` from weight decay.
    pub fn exempt_from_decay(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.no_decay.extend(ids);
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` (the configured rate unless a
    /// schedule overrides it). Non-trainable parameters are left alone.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f32) {
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, weight_decay, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (&id, g) in grads {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let wd = if param.tensor.rows() > 1 && !self.no_decay.contains(&id) { weight_decay } else { 0.0 };
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, &gi), mi), vi) in param
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr);
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f32) -> f32 {
    let total: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
