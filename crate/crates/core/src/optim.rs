//! SGD with Nesterov momentum, Adam, and a warmup + cosine learning-rate
//! schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T: Real = f32> {
    /// Momentum buffer (SGD) or first moment (Adam).
    pub velocity: BTreeMap<String, Tensor<T>>,
    /// Adam second moment.
    pub second: BTreeMap<String, Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            velocity: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }
}

fn validate_grads<T: Real>(params: &ParameterSet<T>, grads: &BTreeMap<String, Tensor<T>>, op: &'static str) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(op, p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

/// One Nesterov step:
///
/// ```text
/// v <- momentum * v + g
/// p <- p - lr * (g + momentum * v)
/// ```
///
/// With `momentum = 0` this is plain SGD. Gradients are validated before any
/// parameter is touched, so a rejected step leaves everything unchanged.
pub fn sgd_nesterov_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: T,
    momentum: T,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    validate_grads(params, grads, "sgd_nesterov_step")?;
    for (name, g) in grads {
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name)?;
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * (gv + momentum * *vv);
        }
    }
    state.step += 1;
    Ok(())
}

/// One Adam step with bias-corrected moments (beta1 0.9, beta2 0.999,
/// eps 1e-8).
pub fn adam_step<T: Real>(
    params: &mut ParameterSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: T,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    validate_grads(params, grads, "adam_step")?;
    let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
    let t = (state.step + 1) as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (name, g) in grads {
        let m = state.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name)?;
        for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps.min(step)) as f64 / decay_steps as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
