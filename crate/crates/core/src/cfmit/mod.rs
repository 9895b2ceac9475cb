//! Catastrophic-forgetting mitigation for continued pretraining: layer-wise
//! learning-rate decay, warmup, layer freezing, mixout and experience replay.

mod presets;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, ParamGroup, ParamStore};
use crate::numerics::{Graph, Real, Tensor};

pub use presets::{preset, presets, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    /// Every `frequency`-th step trains on a replay batch.
    pub frequency: usize,
    /// Previous-stage corpus; may instead be supplied programmatically.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
}

/// Each field is `None` when the technique is off.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CFConfig {
    pub llrd_decay: Option<f64>,
    pub warmup_fraction: Option<f64>,
    pub freeze_layers: Option<usize>,
    pub mixout_p: Option<f64>,
    pub replay: Option<ReplayConfig>,
}

impl CFConfig {
    pub fn is_plain(&self) -> bool {
        *self == CFConfig::default()
    }

    /// Mixout together with replay was never validated as a combination.
    pub fn is_unvalidated(&self) -> bool {
        self.mixout_p.is_some() && self.replay.is_some()
    }

    pub fn replay_frequency(&self) -> Option<usize> {
        self.replay.as_ref().map(|r| r.frequency)
    }

    /// Check ranges against the model depth. Returns warnings.
    pub fn validate(&self, n_layers: usize) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if let Some(d) = self.llrd_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::config(format!("llrd_decay {d} outside (0, 1]")));
            }
        }
        if let Some(w) = self.warmup_fraction {
            if !(0.0..1.0).contains(&w) {
                return Err(Error::config(format!("warmup_fraction {w} outside [0, 1)")));
            }
        }
        if let Some(k) = self.freeze_layers {
            if k > n_layers {
                return Err(Error::config(format!("cannot freeze {k} layers of a {n_layers}-layer model")));
            }
        }
        if let Some(p) = self.mixout_p {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("mixout probability {p} outside [0, 1)")));
            }
        }
        if let Some(r) = &self.replay {
            if r.frequency == 0 {
                return Err(Error::config("replay frequency must be at least 1"));
            }
            if r.frequency == 1 {
                warnings.push("replay frequency 1 trains on replay batches only".to_string());
            }
        }
        if self.is_unvalidated() {
            warnings.push("unvalidated: mixout combined with experience replay".to_string());
        }
        Ok(warnings)
    }
}

/// Learning rate of one parameter under layer-wise decay. The top encoder
/// layer and all heads get `base_lr`; layer `k` below the top gets
/// `base_lr * decay^k`; embeddings get `base_lr * decay^n_layers`.
pub fn llrd_lr(base_lr: f64, decay: f64, param_path: &str, n_layers: usize) -> Result<f64> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::config(format!("llrd_decay {decay} outside (0, 1]")));
    }
    Ok(match ParamGroup::of(param_path, n_layers)? {
        ParamGroup::Head(_) => base_lr,
        ParamGroup::Layer(i) => base_lr * decay.powi((n_layers - 1 - i) as i32),
        ParamGroup::Embedding => base_lr * decay.powi(n_layers as i32),
    })
}

/// Whether `path` is frozen when the `k` input-side layers are frozen.
/// Embeddings freeze together with any positive `k`.
pub fn is_frozen(path: &str, k: usize, n_layers: usize) -> Result<bool> {
    if k > n_layers {
        return Err(Error::config(format!("cannot freeze {k} layers of a {n_layers}-layer model")));
    }
    Ok(match ParamGroup::of(path, n_layers)? {
        ParamGroup::Embedding => k > 0,
        ParamGroup::Layer(i) => i < k,
        ParamGroup::Head(_) => false,
    })
}

/// Zero the gradients of frozen parameters. Returns the frozen paths.
pub fn apply_layer_freezing(grads: &mut BTreeMap<String, Vec<f32>>, k: usize, n_layers: usize) -> Result<Vec<String>> {
    let mut frozen = Vec::new();
    for (path, g) in grads.iter_mut() {
        if is_frozen(path, k, n_layers)? {
            g.iter_mut().for_each(|x| *x = 0.0);
            frozen.push(path.clone());
        }
    }
    Ok(frozen)
}

/// Per-parameter learning rate at `lr_t`, `None` for frozen parameters.
pub fn parameter_rates<F: Real>(
    params: &ParamStore<F>,
    cf: &CFConfig,
    lr_t: f64,
    n_layers: usize,
) -> Result<BTreeMap<String, Option<f64>>> {
    params
        .paths()
        .map(|p| {
            if is_frozen(p, cf.freeze_layers.unwrap_or(0), n_layers)? {
                return Ok((p.clone(), None));
            }
            let lr = match cf.llrd_decay {
                Some(d) => llrd_lr(lr_t, d, p, n_layers)?,
                None => lr_t,
            };
            Ok((p.clone(), Some(lr)))
        })
        .collect()
}

/// Keep-mask for one tensor: `true` keeps the current value, drawn with
/// probability `1 - p`.
pub fn mixout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() >= p).collect()
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("mixout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Effective weights for one forward pass:
/// `(mask*current + (1-mask)*anchor - p*anchor) / (1-p)`.
pub fn mixout_apply<F: Real, R: Rng + ?Sized>(current: &Tensor<F>, anchor: &Tensor<F>, p: f64, rng: &mut R) -> Result<Tensor<F>> {
    check_p(p)?;
    if current.shape() != anchor.shape() {
        return Err(Error::config(format!("mixout anchor shape {:?} differs from {:?}", anchor.shape(), current.shape())));
    }
    if p == 0.0 {
        return Ok(current.clone());
    }
    let mask = mixout_mask(current.numel(), p, rng);
    let (pf, q) = (F::of(p), F::of(1.0 - p));
    let data = current
        .data()
        .iter()
        .zip(anchor.data())
        .zip(&mask)
        .map(|((&c, &a), &m)| if m { (c - pf * a) / q } else { (a - pf * a) / q })
        .collect();
    Ok(Tensor::new(current.shape().to_vec(), data)?)
}

/// Bind parameters as trainable leaves, routing every parameter that has an
/// anchor through mixout. Gradients reach the current weights scaled by
/// `mask / (1-p)`.
pub fn bind_with_mixout<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    anchor: &ParamStore<F>,
    p: f64,
    rng: &mut R,
) -> Result<(Bound, BTreeMap<String, crate::numerics::Var>)> {
    check_p(p)?;
    let mut bound = Bound::default();
    let mut leaves = BTreeMap::new();
    for (path, t) in params.iter() {
        let leaf = g.param(t.clone());
        leaves.insert(path.clone(), leaf);
        let eff = match anchor.get(path) {
            Some(a) if p > 0.0 && a.shape() == t.shape() => {
                let mask = mixout_mask(t.numel(), p, rng);
                let q = F::of(1.0 - p);
                let scale: Vec<F> = mask.iter().map(|&m| if m { F::one() / q } else { F::zero() }).collect();
                let shift: Vec<F> = mask
                    .iter()
                    .zip(a.data())
                    .map(|(&m, &av)| {
                        let keep = if m { F::one() } else { F::zero() };
                        (F::one() - keep - F::of(p)) * av / q
                    })
                    .collect();
                g.scale_shift(leaf, scale, Some(shift))?
            }
            _ => leaf,
        };
        bound.set(path.clone(), eff);
    }
    Ok((bound, leaves))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchKind {
    Main,
    Replay,
}

/// Steps are numbered from 1; every step divisible by `n` is a replay step.
pub fn replay_schedule(step: u64, n: usize) -> BatchKind {
    if n > 0 && step.is_multiple_of(n as u64) {
        BatchKind::Replay
    } else {
        BatchKind::Main
    }
}
