use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam step on every entry, then zeroes the gradients.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves the store untouched.
pub fn adam_update(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    if let Some(bad) = store.entries().find(|e| !e.grad.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for parameter `{}`", bad.name)));
    }
    for e in store.entries_mut() {
        e.step += 1;
        let t = e.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g = e.grad.data();
        let m = e.m.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = e.v.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        if cfg.lr != 0.0 {
            let (m, v) = (e.m.data(), e.v.data());
            let p = e.value.data_mut();
            for i in 0..p.len() {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
    store.zero_grad();
    Ok(())
}

/// Global L2 norm of all gradients in the store.
pub fn global_grad_norm(store: &ParameterStore) -> f64 {
    store.entries().map(|e| e.grad.squared_norm()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping. Norms within rounding of `max_norm` are left alone,
/// so clipping twice is the same as clipping once.
pub fn clip_global_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm * (1.0 + 1e-12) {
        let s = max_norm / norm;
        for e in store.entries_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
