//! Single-file tensor checkpoints.
//!
//! Layout: 8-byte magic `NUCKPT01`, u64 LE header length, a JSON header, then
//! each named f32 section in little-endian order. The header records section
//! names, lengths and a SHA-256 over all section bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 8] = b"NUCKPT01";

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl CkptError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    fn format(path: &Path, reason: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), reason: reason.into() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    sections: Vec<(String, u64)>,
    sha256: String,
}

/// Loaded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub sections: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn take(&mut self, name: &str, path: &Path) -> Result<Vec<f32>, CkptError> {
        self.sections.remove(name).ok_or_else(|| CkptError::format(path, format!("missing section {name}")))
    }
}

fn section_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save(path: &Path, meta: &serde_json::Value, sections: &[(&str, &[f32])]) -> Result<(), CkptError> {
    let mut hasher = Sha256::new();
    let encoded: Vec<Vec<u8>> = sections.iter().map(|(_, d)| section_bytes(d)).collect();
    encoded.iter().for_each(|b| hasher.update(b));
    let header = Header {
        meta: meta.clone(),
        sections: sections.iter().map(|(n, d)| (n.to_string(), d.len() as u64)).collect(),
        sha256: crate::datastore::hex(&hasher.finalize()),
    };
    let header = serde_json::to_vec(&header).map_err(|e| CkptError::format(path, e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CkptError::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let result = (|| -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for b in &encoded {
            w.write_all(b)?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CkptError::io(path, e));
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| CkptError::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| CkptError::io(path, e))?;
    if &magic != MAGIC {
        return Err(CkptError::format(path, "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| CkptError::io(path, e))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(CkptError::format(path, format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|e| CkptError::io(path, e))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| CkptError::format(path, e.to_string()))?;
    let mut hasher = Sha256::new();
    let mut sections = BTreeMap::new();
    for (name, n) in header.sections {
        let mut bytes = vec![0u8; n as usize * 4];
        r.read_exact(&mut bytes).map_err(|e| CkptError::format(path, format!("section {name} truncated: {e}")))?;
        hasher.update(&bytes);
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        sections.insert(name, data);
    }
    if crate::datastore::hex(&hasher.finalize()) != header.sha256 {
        return Err(CkptError::format(path, "section checksum mismatch"));
    }
    Ok(Checkpoint { meta: header.meta, sections })
}
