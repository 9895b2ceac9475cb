//! BERT-style encoder with MLM, NSP, token-classification, span-extraction
//! and sequence-classification heads.
//!
//! Parameters live in a [`ParamStore`] keyed by stable dotted paths.
//! Encoder layers are numbered from 0 (nearest the input) to
//! `n_layers - 1` (top); the layer index is part of every layer path.

mod encoder;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use encoder::{
    bind, bind_constants, forward_encoder, mlm_logits, mlm_logits_at, ner_logits, nsp_logits, qa_logits, re_logits, Bound, EncoderBatch,
    Model,
};
pub use params::{add_head, init_params, is_no_decay, param_shapes, HeadKind, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_segments")]
    pub n_segment_types: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Share the token embedding matrix with the MLM output projection.
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_segments() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-12
}
fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, hidden 64, 4 heads, ff 128, 128 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            hidden_dim: 64,
            n_heads: 4,
            ff_dim: 128,
            max_seq_len: 128,
            vocab_size,
            n_segment_types: 2,
            dropout_rate: 0.0,
            tie_embeddings: true,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!("hidden_dim {} is not divisible by n_heads {}", self.hidden_dim, self.n_heads)));
        }
        if self.n_layers == 0 || self.ff_dim == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_segment_types == 0 {
            return Err(Error::config("n_segment_types must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    /// Fields that differ from `other`, ignoring dropout and init settings.
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, a: usize, b: usize| {
            if a != b {
                out.push(format!("{name}: {a} vs {b}"));
            }
        };
        check("n_layers", self.n_layers, other.n_layers);
        check("hidden_dim", self.hidden_dim, other.hidden_dim);
        check("n_heads", self.n_heads, other.n_heads);
        check("ff_dim", self.ff_dim, other.ff_dim);
        check("max_seq_len", self.max_seq_len, other.max_seq_len);
        check("vocab_size", self.vocab_size, other.vocab_size);
        check("n_segment_types", self.n_segment_types, other.n_segment_types);
        if self.tie_embeddings != other.tie_embeddings {
            out.push(format!("tie_embeddings: {} vs {}", self.tie_embeddings, other.tie_embeddings));
        }
        out
    }
}
