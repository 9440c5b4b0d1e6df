//! Vision-language fine-tuning harness.
//!
//! A decoder-only transformer reads image patch tokens from both views
//! followed by a chat-formatted prompt. Its weights are frozen (stored in
//! 4-bit NormalFloat form when they exceed a memory budget) and low-rank
//! adapters on the attention and MLP projections are trained with AdamW,
//! linear warmup, global-norm clipping and gradient accumulation, with the
//! loss restricted to completion tokens. Classification runs through the
//! constrained decoder over the three canonical labels.
//!
//! The shipped backbone is a small seeded stand-in; larger presets describe
//! configurations only.

mod adapt;
mod backbone;
mod classify;
pub mod config;
mod finetune;
pub mod quant;
pub mod tokens;

use std::path::PathBuf;

pub use adapt::{adapted_modules, attach_adapters, attach_adapters_to, load_base, trainable_fraction};
pub use backbone::{bf16_round, FrozenWeight, ImageInput, Linear, VlmModel};
pub use classify::{PairScorer, VlmClassifier};
pub use config::{AdapterConfig, BackboneConfig, LrDecay, Precision, SftRecipe, LLAMA_11B_VISION_ID, TINY_BACKBONE_ID};
pub use finetune::{
    finetune, load_adapter, save_adapter, FinetuneOptions, FinetuneOutcome, SftExample, StepLog, FINAL_ADAPTER,
    LOSS_LOG,
};

#[derive(Debug, thiserror::Error)]
pub enum VlmError {
    #[error("adapter configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model unavailable: {0}")]
    Unavailable(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("estimated training memory {needed_mb:.0} MB exceeds the {limit_mb:.0} MB limit; {hint}")]
    OutOfMemory { needed_mb: f64, limit_mb: f64, hint: String },
    #[error("prompt template hash {current} does not match the checkpoint's {checkpoint}")]
    TemplateMismatch { checkpoint: String, current: String },
    #[error("VLM I/O on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] crate::ckpt::CkptError),
    #[error(transparent)]
    Decode(#[from] crate::decode::DecodeError),
    #[error(transparent)]
    Data(#[from] crate::datastore::DataError),
}
