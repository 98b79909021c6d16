//! Adam with classic (coupled) L2 weight decay: the decay term is added to
//! the gradient before the moment updates. The decoupled AdamW form would
//! instead subtract `lr * weight_decay * p` outside the adaptive step.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update over `params` in place. Moment buffers are
/// zero-initialized on the first call.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(contract(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if state.m.is_empty() && state.v.is_empty() {
        state.m = params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    let buffers_match = state.m.len() == params.len()
        && state.v.len() == params.len()
        && params
            .iter()
            .zip(state.m.iter().zip(&state.v))
            .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel());
    if !buffers_match {
        return Err(contract("optimizer moment buffers do not match parameter shapes"));
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gd = gi + cfg.weight_decay * *pi;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gd;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gd * gd;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= cfg.lr * mhat / (libm::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}
