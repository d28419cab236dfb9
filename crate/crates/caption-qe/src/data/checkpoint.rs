//! Checkpoint storage: JSON metadata header, exact f64 parameter block,
//! SHA-256 checksum.
//!
//! Layout: magic `CQEC`, u32 header length, the UTF-8 JSON header, the
//! parameter buffer as little-endian f64, and a trailing 32-byte SHA-256
//! digest of everything before it. Parameters are stored at full precision
//! so a saved-then-loaded model scores bit-identically.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::io_util;
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"CQEC";
/// Bumped on any incompatible change to the header or parameter encoding.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A trained (or initialized) model together with its selection metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    /// Optimizer step the parameters were captured at.
    pub step: u64,
    /// Dev-set Spearman at capture time, when an evaluation ran.
    pub dev_spearman: Option<f64>,
    /// Free-form origin tag, e.g. "scratch", "pretrained", "fine-tuned".
    pub provenance: String,
}

impl Checkpoint {
    /// Error unless the checkpoint was built for exactly this config's
    /// parameter layout.
    pub fn ensure_layout(&self, expected: &ModelConfig, path: &Path) -> Result<(), DataError> {
        if self.params.matches_config(expected) {
            Ok(())
        } else {
            Err(DataError::VersionMismatch {
                path: path.display().to_string(),
                detail: format!(
                    "checkpoint has P={}, K={} but P={}, K={} was requested",
                    self.config.proj_dim,
                    self.config.num_labels,
                    expected.proj_dim,
                    expected.num_labels
                ),
            })
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    dev_spearman: Option<f64>,
    provenance: String,
    param_len: usize,
}

/// Write a checkpoint. Refuses to overwrite unless `overwrite` is set.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path, overwrite: bool) -> Result<(), DataError> {
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: ckpt.config,
        step: ckpt.step,
        dev_spearman: ckpt.dev_spearman,
        provenance: ckpt.provenance.clone(),
        param_len: ckpt.params.len(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(std::io::Error::from)?;

    let mut writer = BufWriter::new(io_util::create_file(path, overwrite)?);
    let mut hasher = Sha256::new();
    let emit = |writer: &mut BufWriter<std::fs::File>,
                    hasher: &mut Sha256,
                    bytes: &[u8]|
     -> std::io::Result<()> {
        hasher.update(bytes);
        writer.write_all(bytes)
    };

    emit(&mut writer, &mut hasher, MAGIC)?;
    emit(
        &mut writer,
        &mut hasher,
        &(header_bytes.len() as u32).to_le_bytes(),
    )?;
    emit(&mut writer, &mut hasher, &header_bytes)?;
    for value in ckpt.params.values() {
        emit(&mut writer, &mut hasher, &value.to_le_bytes())?;
    }
    let digest = hasher.finalize();
    writer.write_all(&digest)?;
    writer.flush()?;
    Ok(())
}

/// Read a checkpoint back, verifying magic, version, length and checksum.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let corrupt = |detail: &str| DataError::CorruptCheckpoint {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };

    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 4 + 32 {
        return Err(corrupt("file too short"));
    }

    let (body, stored_digest) = raw.split_at(raw.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..4] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }

    let header_len = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8 + header_len;
    if body.len() < header_end {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[8..header_end])
        .map_err(|e| corrupt(&format!("unreadable header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.display().to_string(),
            detail: format!(
                "format version {} (this build reads {})",
                header.format_version, CHECKPOINT_FORMAT_VERSION
            ),
        });
    }

    let param_bytes = &body[header_end..];
    if param_bytes.len() != header.param_len * 8 {
        return Err(corrupt("parameter block length disagrees with header"));
    }
    let values: Vec<f64> = param_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ModelParams::from_raw(&header.config, values).map_err(|e| {
        DataError::VersionMismatch {
            path: path.display().to_string(),
            detail: e.to_string(),
        }
    })?;

    Ok(Checkpoint {
        params,
        config: header.config,
        step: header.step,
        dev_spearman: header.dev_spearman,
        provenance: header.provenance,
    })
}
