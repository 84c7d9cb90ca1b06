//! AdamW with decoupled weight decay, and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    decay: Vec<bool>,
    steps: u64,
}

impl AdamW {
    /// `decay[i]` selects which tensors receive weight decay.
    pub fn new(config: AdamWConfig, shapes: &[&[usize]], decay: Vec<bool>) -> Result<Self> {
        if decay.len() != shapes.len() {
            return Err(Error::Contract("decay mask length differs from parameter count".into()));
        }
        Ok(Self {
            config,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            decay,
            steps: 0,
        })
    }

    /// Completed updates.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Returns `false` (leaving everything untouched)
    /// when a gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<bool> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!("optimizer holds {} tensors, got {} params and {} grads", self.first.len(), params.len(), grads.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Dimension(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!("non-finite gradient in tensor {i}; optimizer step skipped");
            return Ok(false);
        }
        self.steps += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let shrink = if self.decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
            let p = params[i].data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = *p * shrink - lr * update;
            }
        }
        Ok(true)
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `total`. Step `t` is the `t`-th update (step 0 is before training).
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
