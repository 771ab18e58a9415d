//! Charbonnier loss, Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{ops, Element, Tensor};

/// Mean of `sqrt((pred - target)^2 + eps^2)`.
pub fn charbonnier_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<T> {
    ops::charbonnier(pred, target, eps)
}

/// `lr_min + (lr_init - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::arg(format!("step {step} is outside 0..={total}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::arg(format!("{name} = {b} is outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Optimizer state aligned with a [`ParamStore`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    /// Updates applied so far.
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let moments = params
            .iter()
            .map(|e| Moments {
                name: e.name.clone(),
                m: Tensor::zeros(e.value.shape().to_vec()),
                v: Tensor::zeros(e.value.shape().to_vec()),
            })
            .collect();
        Self { step: 0, moments }
    }

    fn check_aligned(&self, params: &ParamStore<T>) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::ParamMismatch(format!(
                "optimizer tracks {} tensors, store has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (mo, e) in self.moments.iter().zip(params.iter()) {
            if mo.name != e.name || mo.m.shape() != e.value.shape() || mo.v.shape() != e.value.shape() {
                return Err(Error::ParamMismatch(format!("optimizer slot `{}` does not match `{}`", mo.name, e.name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    state.check_aligned(params)?;
    if let Some(bad) = params.iter().find(|e| !e.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", bad.name)));
    }
    let t = state.step + 1;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    for (e, mo) in params.iter_mut().zip(state.moments.iter_mut()) {
        let g = e.grad.data();
        let m = mo.m.data_mut();
        let v = mo.v.data_mut();
        for (i, p) in e.value.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}
