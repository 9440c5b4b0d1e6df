//! Dataset persistence, splitting and prompt construction.
//!
//! # Shard format (version 1)
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header (32 bytes)
//!   magic          8 bytes  "NUPXSHRD"
//!   format_version u32      1
//!   crop_size      u32      side length S of each view
//!   record_count   u64
//!   reserved       u64      0
//! record (48 + 2·S² bytes), repeated record_count times
//!   event_id       u64
//!   flavor         u8       0 = nu_e, 1 = nu_mu
//!   current        u8       0 = CC, 1 = NC
//!   class          u8       0 = NUE_CC, 1 = NUMU_CC, 2 = NC
//!   reserved       5 bytes  0
//!   energy_gev     f64
//!   vertex         3 × f64  meters
//!   view_xz        S² bytes row-major
//!   view_yz        S² bytes row-major
//! ```
//!
//! A dataset directory holds `shard-NNNNN.bin` files plus `manifest.json`.
//! The manifest is written last through an atomic rename, so its presence
//! implies every shard it lists is complete.

mod manifest;
mod prompt;
mod shard;
mod split;

pub use manifest::{write_dataset, Dataset, DatasetManifest, Subset, MANIFEST_FILE};
pub use prompt::{build_prompt_record, PromptConfig, PromptRecord, PROMPT_TEMPLATE_VERSION};
pub use shard::{read_shard, record_size, ShardReader, ShardWriter, FORMAT_VERSION, SHARD_MAGIC};
pub use split::{split, SplitIndices, SplitSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("malformed data in {path}: {reason}")]
    Format { path: std::path::PathBuf, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Generator(#[from] crate::eventgen::EventGenError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<std::path::PathBuf>, reason: impl Into<String>) -> Self {
        DataError::Format { path: path.into(), reason: reason.into() }
    }
}

/// Hex SHA-256 of a list of event ids, used to tie predictions to a split.
pub fn ids_hash(ids: &[u64]) -> String {
    use sha2::{Digest, Sha256};
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
