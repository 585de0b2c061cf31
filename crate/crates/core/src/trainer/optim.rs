//! AdamW with decoupled weight decay and the cosine warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamSet};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, weight_decay: 0.05, eps: 1e-8 }
    }
}

/// Per-parameter moment buffers plus the step counter.
pub struct OptimState {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn new(ps: &ParamSet, cfg: AdamWConfig) -> Self {
        let m = ps.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
        let v = ps.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
        OptimState { cfg, m, v, t: 0 }
    }

    /// One AdamW step. Weight decay multiplies weights by (1 − lr·wd)
    /// independently of the adaptive update.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite gradient at optimizer step {}",
                self.t + 1
            )));
        }
        assert_eq!(self.m.len(), ps.len(), "optimizer bound to a different parameter set");
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (idx, p) in ps.iter_mut().enumerate() {
            let g = &grads.bufs[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (j, w) in p.value.data.iter_mut().enumerate() {
                *w -= lr * c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Linear ramp 0 → base over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    assert!(warmup_steps < total_steps, "warmup must be shorter than the run");
    assert!(step <= total_steps, "step beyond schedule");
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let p = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}
