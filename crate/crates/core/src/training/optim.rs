//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::{contract, shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real = f32> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `decay[i]` selects whether parameter `i` is decayed.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() {
            return Err(contract(format!(
                "{} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err("optimizer step", p.shape(), g.shape()));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(contract("parameter list changed between optimizer steps"));
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let wd = T::lit(lr * c.weight_decay);
        for i in 0..params.len() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].data();
            let p = params[i].data_mut();
            let decay_i = decay[i] && c.weight_decay != 0.0;
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                if decay_i {
                    p[j] = p[j] - wd * p[j];
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = p[j] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Decay matrices only; biases, norms and embeddings vectors are left alone.
pub fn decay_mask<T: Real>(params: &[&mut Tensor<T>]) -> Vec<bool> {
    params.iter().map(|p| p.rank() >= 2).collect()
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to `min`
/// at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    /// Rate for 0-based step `t`.
    pub fn lr(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.base * (t + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let frac = ((t - self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
