use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

use super::params::{ParamStore, StoreGrads};

/// Adam with decoupled weight decay and global-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 7.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let shapes = store.ids().map(|id| vec![0.0; store.get(id).len()]);
        let m: Vec<_> = shapes.collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Entries without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &StoreGrads, lr: f64) -> Result<StepStats> {
        store.check_updatable()?;
        if grads.grads.len() != store.len() || self.m.len() != store.len() {
            return Err(dim_err("gradient / optimizer state does not match the store"));
        }
        if grads.has_non_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient at step {}",
                self.t + 1
            )));
        }
        let norm = grads.global_norm();
        let clip_scale = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(dim_err("gradient length differs from parameter"));
            }
            for i in 0..p.len() {
                let gi = g[i] * clip_scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
        Ok(StepStats {
            grad_norm: norm,
            clip_scale,
            step: self.t,
        })
    }
}

/// Convenience wrapper matching the single-call form `adam_step(params, grads, state)`.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &StoreGrads,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepStats> {
    state.step(store, grads, lr)
}

/// Linear warmup over `warmup` steps, then cosine decay from `base` to
/// `base * min_frac` at `total`. Steps count from 1.
pub fn cosine_lr(step: u64, total: u64, warmup: u64, base: f64, min_frac: f64) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let floor = base * min_frac;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}
