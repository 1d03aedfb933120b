use serde::{Deserialize, Serialize};

use crate::autodiff::params::{GradMap, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrix-shaped parameters only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for every parameter of one store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |_| Vec::new();
        OptimizerState {
            config,
            step: 0,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
        }
    }
}

/// One Adam update with bias correction. Only trainable parameters that
/// received a gradient move.
///
/// A non-finite gradient aborts before any parameter is touched.
pub fn optimizer_step(store: &mut ParamStore, grads: &GradMap, state: &mut OptimizerState) -> Result<()> {
    for (id, p) in store.iter() {
        if let Some(g) = grads.get(id) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if p.trainable && !g.is_finite() {
                return Err(Error::Diverged(format!("non-finite gradient for `{}`", p.name)));
            }
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let decay = if p.value.rank() == 2 { weight_decay } else { 0.0 };
        let m = &mut state.first[id.0];
        let v = &mut state.second[id.0];
        if m.is_empty() {
            m.resize(g.numel(), 0.0);
            v.resize(g.numel(), 0.0);
        }
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
        }
    }
    Ok(())
}
