use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_no_decay, ParamStore};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, skipped for biases and norm parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments plus the number of completed updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            let mut s = ParamStore::new();
            for (k, t) in p.iter() {
                s.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self { step: 0, m: zeros(params), v: zeros(params) }
    }

    /// Add zeroed moments for parameters that appeared since construction
    /// (for example a freshly attached head).
    pub fn cover(&mut self, params: &ParamStore<f32>) {
        for (k, t) in params.iter() {
            if !self.m.contains(k) {
                self.m.insert(k.clone(), Tensor::zeros(t.shape()));
                self.v.insert(k.clone(), Tensor::zeros(t.shape()));
            }
        }
    }
}

/// One Adam update with bias correction.
///
/// `lr_of` gives each parameter's learning rate; `None` leaves the parameter
/// and its moments untouched. Gradients are checked for finiteness before
/// anything is modified.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr_of: &dyn Fn(&str) -> Option<f64>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (path, g) in grads {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericAt { path: path.clone(), msg: format!("non-finite gradient at element {i}") });
        }
    }
    state.cover(params);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (path, w) in params.iter_mut() {
        let Some(g) = grads.get(path) else { continue };
        let Some(lr) = lr_of(path) else { continue };
        if g.len() != w.numel() {
            return Err(Error::NumericAt { path: path.clone(), msg: "gradient length differs from parameter".into() });
        }
        let m = state.m.get_mut(path).expect("covered").data_mut();
        let v = state.v.get_mut(path).expect("covered").data_mut();
        let decay = if is_no_decay(path) { 0.0 } else { cfg.weight_decay };
        for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g64 = gi as f64;
            let m64 = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * g64;
            let v64 = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * g64 * g64;
            *mi = m64 as f32;
            *vi = v64 as f32;
            let mhat = m64 / bc1;
            let vhat = v64 / bc2;
            let upd = mhat / (vhat.sqrt() + cfg.eps) + decay * *wi as f64;
            *wi = (*wi as f64 - lr * upd) as f32;
        }
    }
    Ok(())
}
