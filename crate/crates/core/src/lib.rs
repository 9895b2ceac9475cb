//! Desk-scale continual-pretraining laboratory: a small BERT-style encoder
//! trained from scratch, adapted to new domains with forgetting mitigation,
//! evaluated intrinsically and on token, span and sequence tasks.

pub mod cfmit;
pub mod dataport;
pub mod error;
pub mod finetune;
pub mod mlmeval;
pub mod model;
pub mod numerics;
pub mod persist;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synthetic;
pub mod tokenizer;

pub use error::{Error, ErrorKind, Result};
