//! MLM + NSP pretraining: corpus handling, batch construction, Adam, the
//! learning-rate schedule and the training loop.

mod batches;
mod corpus;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::cfmit::CFConfig;
use crate::error::{Error, Result};

pub use batches::{
    batch_for_step, build_pair, make_batch, make_mlm_nsp_batches, mask_tokens, EncodedCorpus, MaskingConfig, PretrainBatch, IS_NEXT,
    NOT_NEXT,
};
pub use corpus::Corpus;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use train::{batch_loss, run_pretraining, EvalPoint, Init, LogRecord, PretrainData, PretrainOutcome, Pretrainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Used unless the CF configuration sets its own warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Packed pair length; at most the model's `max_seq_len`.
    pub seq_len: usize,
    pub masking: MaskingConfig,
    pub adam: AdamConfig,
    /// Held-out evaluation interval in steps; 0 evaluates only at the ends.
    pub eval_every: u64,
    /// Held-out sentences scored for pseudo-perplexity.
    pub eval_sentences: usize,
    pub heldout_fraction: f64,
    pub cf: CFConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            total_steps: 500,
            batch_size: 8,
            warmup_fraction: 0.0,
            seed: 0,
            seq_len: 64,
            masking: MaskingConfig::default(),
            adam: AdamConfig::default(),
            eval_every: 100,
            eval_sentences: 50,
            heldout_fraction: 0.05,
            cf: CFConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn effective_warmup(&self) -> f64 {
        self.cf.warmup_fraction.unwrap_or(self.warmup_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.seq_len < 5 {
            return Err(Error::config("seq_len must leave room for two sentences and three specials"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("peak_lr {} is invalid", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::config("heldout_fraction outside [0, 1)"));
        }
        self.masking.validate()
    }
}

/// Learning rate before update `step` (0-based): linear warmup from 0 over
/// `warmup_fraction * total_steps` steps, then linear decay reaching 0 at
/// the final step.
pub fn lr_at(step: u64, plan: &TrainPlan) -> f64 {
    let t = plan.total_steps as f64;
    let w = plan.effective_warmup() * t;
    let s = step as f64;
    if s < w {
        return plan.peak_lr * s / w;
    }
    let span = t - 1.0 - w;
    if span <= 0.0 {
        return plan.peak_lr;
    }
    (plan.peak_lr * (t - 1.0 - s) / span).max(0.0)
}
