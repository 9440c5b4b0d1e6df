//! Siamese MobileNetV2-style baseline.
//!
//! Each 512×512 view passes through a shared stem and shared inverted
//! residual blocks; the two branch outputs are concatenated along channels
//! and fed to a trunk of further blocks, global-average pooled and classified
//! by a two-layer head. Forward and backward passes are written out by hand
//! over per-sample channel-major tensors, with batch gradients reduced in a
//! fixed order so training is reproducible under any thread count.

mod block;
pub mod config;
mod layout;
mod model;
pub mod ops;
mod train;

use std::path::PathBuf;

pub use config::{Activation, BlockSpec, CnnConfig, TrainRecipe};
pub use layout::{ParamInfo, ParamLayout};
pub use model::{CnnModel, SampleGrad};
pub use train::{
    batch_gradient, evaluate, train, BatchResult, EarlyStopping, EpochRecord, ExampleSource, StopDecision, TrainOptions,
    TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum CnnError {
    #[error("invalid CNN configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite {quantity} at epoch {epoch}, step {step}: {detail}")]
    NonFinite { quantity: String, epoch: usize, step: usize, detail: String },
    #[error("CNN I/O on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] crate::ckpt::CkptError),
    #[error(transparent)]
    Data(#[from] crate::datastore::DataError),
}
