use serde::{Deserialize, Serialize};

use crate::backbone::ModelState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, shaped like the model, and the number of steps taken.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub m: ModelState,
    pub v: ModelState,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(state: &ModelState) -> Self {
        Self { m: state.zeros_like(), v: state.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update of a flat parameter block at step `t` (1-based). The L2
/// term `weight_decay * param` is added to the gradient before the moments see it.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] + cfg.weight_decay * param[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Applies [`adam_update`] to every parameter tensor. Nothing is modified when any gradient
/// is non-finite; the error names the first offending tensor.
pub fn adam_step(state: &mut ModelState, grads: &ModelState, moments: &mut AdamMoments, cfg: &AdamConfig) -> Result<()> {
    for (name, g) in grads.named_tensors() {
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient in `{name}`")));
        }
    }
    moments.t += 1;
    let t = moments.t;
    let params = state.named_tensors_mut();
    let gs = grads.named_tensors();
    let ms = moments.m.named_tensors_mut();
    let vs = moments.v.named_tensors_mut();
    if params.len() != gs.len() || params.len() != ms.len() || params.len() != vs.len() {
        return Err(Error::Dimension("gradient or moments do not match the model".into()));
    }
    for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
        if p.1.shape() != g.1.shape() || p.1.shape() != m.1.shape() || p.1.shape() != v.1.shape() {
            return Err(Error::Dimension(format!("shape mismatch for `{}`", p.0)));
        }
        adam_update(p.1.data_mut(), g.1.data(), m.1.data_mut(), v.1.data_mut(), t, cfg);
    }
    Ok(())
}
