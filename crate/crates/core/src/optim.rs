//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warmup to `base_lr` at step `warmup`, then cosine annealing to 0 at
/// step `total`. Steps past `total` stay at 0.
pub fn lr_at(step: usize, total: usize, warmup: usize, base_lr: f64) -> f64 {
    if step <= warmup {
        if warmup == 0 {
            return base_lr;
        }
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One scalar AdamW update; `t` is the 1-based step count after this update.
/// Returns the new `(θ, m, v)`.
pub fn adamw_scalar(
    theta: f64,
    g: f64,
    m: f64,
    v: f64,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> (f64, f64, f64) {
    let (b1, b2) = cfg.betas;
    let theta = theta - lr * cfg.weight_decay * theta;
    let m = b1 * m + (1.0 - b1) * g;
    let v = b2 * v + (1.0 - b2) * g * g;
    let m_hat = m / (1.0 - b1.powi(t as i32));
    let v_hat = v / (1.0 - b2.powi(t as i32));
    (theta - lr * m_hat / (v_hat.sqrt() + cfg.eps), m, v)
}

/// Per-parameter first/second moment buffers.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads[i]` belongs to parameter `i` of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let theta = store.get_mut(id).data_mut();
            let g = &grads[i];
            if g.len() != theta.len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!(
                        "gradient {i} has {} values, parameter has {}",
                        g.len(),
                        theta.len()
                    ),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..theta.len() {
                let (th, mj, vj) = adamw_scalar(theta[j], g[j], m[j], v[j], self.t, lr, &self.cfg);
                theta[j] = th;
                m[j] = mj;
                v[j] = vj;
            }
        }
        Ok(())
    }
}
