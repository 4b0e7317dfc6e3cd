use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("moment decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps must be positive"));
        }
        Ok(())
    }
}

/// Adam moments aligned with the parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub config: OptimizerConfig,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: OptimizerConfig, params: &PolicyParams<S>) -> Result<Self> {
        config.validate()?;
        let n = params.param_count();
        Ok(Self { config, m: vec![S::zero(); n], v: vec![S::zero(); n], step: 0 })
    }
}

/// One bias-corrected Adam step in place.
pub fn optimizer_step<S: Scalar>(params: &mut PolicyParams<S>, grad: &Gradient<S>, state: &mut OptimizerState<S>) -> Result<()> {
    let n = params.param_count();
    if grad.data.len() != n || state.m.len() != n {
        return Err(Error::invalid(format!(
            "shape mismatch: {} parameters, {} gradient entries, {} moments",
            n,
            grad.data.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric { layer: params.layout().block_of(i) });
    }
    let c = &state.config;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
    let bc1 = S::of(1.0 - c.beta1.powi(t));
    let bc2 = S::of(1.0 - c.beta2.powi(t));
    let lr = S::of(c.lr);
    let eps = S::of(c.eps);
    let one = S::one();
    let p = params.as_mut_slice();
    for i in 0..n {
        let g = grad.data[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}
