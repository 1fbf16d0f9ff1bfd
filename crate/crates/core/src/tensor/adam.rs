use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Module, Scalar};
use crate::error::{dim_err, param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(param_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(param_err!("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(param_err!("eps must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One bias-corrected Adam step at `step` (1-based).
pub fn adam_update<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    state: &mut AdamMoments<T>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if value.len() != grad.len() || state.m.len() != value.len() || state.v.len() != value.len() {
        return Err(dim_err!("adam: parameter, gradient and state sizes differ"));
    }
    if step == 0 {
        return Err(param_err!("adam steps are counted from 1"));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(libm::pow(cfg.beta1, step as f64));
    let c2 = T::one() - T::lit(libm::pow(cfg.beta2, step as f64));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..value.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over the trainable parameters of a fixed list of modules.
///
/// Moment slots are assigned in visiting order, so the same module list
/// must be passed on every step.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<AdamMoments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies accumulated gradients, then zeroes them.
    pub fn step(&mut self, modules: &mut [&mut dyn Module<T>]) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let cfg = self.cfg;
        let moments = &mut self.moments;
        let mut slot = 0;
        let mut failure = None;
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if !p.trainable || failure.is_some() {
                    return;
                }
                if moments.len() <= slot {
                    moments.push(AdamMoments::zeros(p.grad.len()));
                }
                let grad = core::mem::take(&mut p.grad);
                if let Err(e) = adam_update(p.data_mut(), &grad, &mut moments[slot], step, &cfg) {
                    failure = Some(e);
                }
                p.grad = grad;
                p.zero_grad();
                slot += 1;
            });
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
