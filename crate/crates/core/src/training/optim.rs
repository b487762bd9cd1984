use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn matches(&self, params: &ParamSet) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }
}

/// One AdamW update: decoupled decay `p ← p − lr·λ·p` on parameters flagged for
/// decay, then `p ← p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptimizerState, lr: f64, hp: &AdamW) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::Contract(format!(
            "optimizer got {} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let p = params.param(i);
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adamw", p.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", p.name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let decay = if params.param(i).decay { hp.weight_decay } else { 0.0 };
        let p = params.get_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * decay * p[j];
            p[j] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr · batch_size / 256`, then cosine decay to 0 at
/// `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, base_lr: f64, batch_size: usize) -> f64 {
    let peak = base_lr * batch_size as f64 / 256.0;
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}
