use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(net: &Network) -> Self {
        Self {
            velocity: Gradients::zeros_like(net).tensors,
        }
    }
}

/// `v <- momentum * v + g + weight_decay * p`, then `p <- p - lr * v`.
///
/// Updates only the stored parameters, so circulant layers stay circulant.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    let mut params = net.params_mut();
    let lens_match = params.len() == grads.tensors.len()
        && params.len() == state.velocity.len()
        && params
            .iter()
            .zip(&grads.tensors)
            .zip(&state.velocity)
            .all(|((p, g), v)| p.len() == g.len() && p.len() == v.len());
    if !lens_match {
        return Err(Error::shape("gradients or optimiser state do not match the network parameters"));
    }
    for ((p, g), v) in params.iter_mut().zip(&grads.tensors).zip(&mut state.velocity) {
        for i in 0..p.len() {
            v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * p[i];
            p[i] -= cfg.learning_rate * v[i];
        }
    }
    Ok(())
}
