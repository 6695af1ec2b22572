//! Adam and the exponential moving average of generator weights.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::Params;
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments of every parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &Params<S>) -> Self {
        let zeros = || params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update of `params` with `grads` (one per tensor).
pub fn adam_step<S: Scalar>(params: &mut Params<S>, grads: &[Tensor<S>], state: &mut AdamState<S>, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err("adam_step", format!("{} gradients and {} moments for {} tensors", grads.len(), state.m.len(), params.len())));
    }
    for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(shape_err("adam_step", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i].data()[j].f64();
            let mj = b1 * m[j].f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].f64() + (1.0 - b2) * g * g;
            m[j] = S::c(mj);
            v[j] = S::c(vj);
            *x = S::c(x.f64() - cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps));
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update<S: Scalar>(shadow: &mut Params<S>, params: &Params<S>, decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(shape_err("ema_update", format!("{} shadows for {} tensors", shadow.len(), params.len())));
    }
    for (s, p) in shadow.values_mut().iter_mut().zip(params.values()) {
        if s.shape() != p.shape() {
            return Err(shape_err("ema_update", format!("shadow {:?} for parameter {:?}", s.shape(), p.shape())));
        }
        if decay == 1.0 {
            continue;
        }
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = if decay == 0.0 { b } else { S::c(decay * a.f64() + (1.0 - decay) * b.f64()) };
        }
    }
    Ok(())
}
