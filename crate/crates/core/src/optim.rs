//! SGD with momentum and L2 weight decay.

use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.002;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0001;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("sgd", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("sgd", "momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("sgd", "weight decay must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl OptimState {
    /// Zero velocities shaped like `params`.
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }
}

/// `v <- mu * v + (g + wd * p)`, then `p <- p - lr * v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    check_dim("sgd_step", "gradient count", params.len(), grads.len())?;
    check_dim("sgd_step", "velocity count", params.len(), state.velocity.len())?;
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        p.same_shape("sgd_step", g)?;
        p.same_shape("sgd_step", v)?;
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = state.config;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
