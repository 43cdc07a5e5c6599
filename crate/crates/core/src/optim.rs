//! Gradient-descent optimizers over named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};

/// A named mutable parameter, as handed out by the model.
pub type NamedParam<'a> = (String, &'a mut Tensor);

/// Anything that turns gradients into parameter updates.
pub trait Optimizer {
    /// Applies one update. `grads[i]` belongs to `params[i]`.
    fn step(&mut self, params: &mut [NamedParam<'_>], grads: &[Tensor]) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("bad Adam hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

/// Zero moments shaped like `params`, step counter 0.
pub fn zero_like_state<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> AdamState {
    let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
    AdamState {
        config,
        v: m.clone(),
        m,
        t: 0,
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient is
/// non-finite or mis-shaped.
pub fn adam_step(params: &mut [NamedParam<'_>], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    state.config.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidConfig(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

impl Optimizer for AdamState {
    fn step(&mut self, params: &mut [NamedParam<'_>], grads: &[Tensor]) -> Result<()> {
        adam_step(params, grads, self)
    }
}
