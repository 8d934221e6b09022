use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

fn check_grads(store: &ParamStore) -> Result<()> {
    for id in store.ids() {
        if !store.grad(id).is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    Ok(())
}

/// Plain gradient descent `θ ← θ − lr·∇θ`, then zeroes the gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    check_lr(lr)?;
    check_grads(store)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (value, grad, _, _) = store.moments_mut(id);
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
    store.zero_grads();
    Ok(())
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
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias-corrected moments; increments the store's step
/// counter and zeroes the gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    check_lr(cfg.lr)?;
    check_grads(store)?;
    store.adam_steps += 1;
    let t = store.adam_steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (value, grad, m, v) = store.moments_mut(id);
        for (((theta, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
    Ok(())
}

pub fn adam_step_count(store: &ParamStore) -> u64 {
    store.adam_steps
}
