//! AdamW with per-group learning-rate multipliers and decoupled decay.

use serde::{Deserialize, Serialize};

use crate::arch::ParamStore;
use crate::error::{Error, Result};
use crate::scaling::{MuPPlan, ADAM_EPS, BETA1, BETA2};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new<T: Float>(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// One AdamW update. Group `g` uses rate `lr · lr_multiplier(g)` and
/// decays `p ← p − rate · wd(g) · p` only where `wd(g) > 0`.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    plan: &MuPPlan,
    opt: &mut OptimState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::shape("adamw", "gradient/state count does not match parameters"));
    }
    opt.step += 1;
    let t = opt.step as f64;
    let (bc1, bc2) = (1.0 - BETA1.powf(t), 1.0 - BETA2.powf(t));
    for (i, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || opt.m[i].len() != p.numel() {
            return Err(Error::shape("adamw", format!("parameter {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
        let rec = plan.group(params.specs[i].group);
        let rate = lr * rec.lr_multiplier;
        let decay = rate * rec.weight_decay;
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            if rec.weight_decay > 0.0 {
                *pj = T::lit(pj.as_f64() * (1.0 - decay));
            }
            if update != 0.0 {
                *pj = T::lit(pj.as_f64() - rate * update);
            }
        }
    }
    Ok(())
}
