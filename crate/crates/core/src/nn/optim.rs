use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

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

/// Adam moment accumulators for one parameter store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: AdamConfig,
    first: ParamStore,
    second: ParamStore,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self) -> &ParamStore {
        &self.first
    }

    pub fn second_moment(&self) -> &ParamStore {
        &self.second
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimizerState,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.first)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::numerical(
            format!("gradient of `{name}`"),
            "non-finite value in gradient",
        ));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);

    let moments = state.first.iter_mut().zip(state.second.iter_mut());
    for (((_, p), (_, g)), ((_, m1), (_, m2))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let p = p.as_slice_mut().expect("parameters are contiguous");
        let g = g.as_slice().expect("gradients are contiguous");
        let m1 = m1.as_slice_mut().expect("moments are contiguous");
        let m2 = m2.as_slice_mut().expect("moments are contiguous");
        for i in 0..p.len() {
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::numerical(
            format!("parameter `{name}`"),
            "non-finite value after update",
        ));
    }
    Ok(())
}
