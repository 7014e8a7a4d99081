//! Optimizers, learning-rate schedules and gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::nn::ParamStore;

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr_of` gives the learning rate for each parameter name;
    /// names missing from `grads` are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr_of: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let lr = lr_of(name);
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mut w = data[i] as f64;
                w -= lr * self.cfg.weight_decay * w;
                w -= lr * (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
                data[i] = w as f32;
            }
            *p = Tensor::new(p.shape().to_vec(), data);
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// One-cycle schedule: cosine warmup from `max_lr/div_factor` to `max_lr`
/// over `pct_start` of the run, then cosine annealing to
/// `max_lr/(div_factor·final_div_factor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.05,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    /// Learning rate for zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.max_lr / self.div_factor;
        let fin = initial / self.final_div_factor;
        let warm = ((self.pct_start * self.total_steps as f64) - 1.0).max(1.0);
        let last = (self.total_steps as f64 - 1.0).max(warm + 1.0);
        let s = step as f64;
        let cos = |from: f64, to: f64, frac: f64| {
            to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * frac.clamp(0.0, 1.0)).cos())
        };
        if s <= warm {
            cos(initial, self.max_lr, s / warm)
        } else {
            cos(self.max_lr, fin, (s - warm) / (last - warm))
        }
    }
}

/// Linear warmup to `plateau` over `warmup_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearWarmup {
    pub plateau: f64,
    pub warmup_steps: usize,
}

impl LinearWarmup {
    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.plateau
        } else {
            self.plateau * step as f64 / self.warmup_steps as f64
        }
    }
}
