//! Checkpoint files: the binary head (see `neuroadapt_core::model::Checkpoint`)
//! plus a JSON sidecar describing how it was trained.

use std::fs;
use std::path::{Path, PathBuf};

use neuroadapt_core::finetune::{FinetuneConfig, TrainingLog};
use neuroadapt_core::hash::to_hex;
use neuroadapt_core::model::{Checkpoint, EncoderSpec};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::fsutil::{read_json, write_atomic, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSidecar {
    /// SHA-256 of the checkpoint bytes, hex.
    pub fingerprint: String,
    pub encoder: EncoderSpec,
    pub encoder_fingerprint: String,
    pub finetune: FinetuneConfig,
    pub training: TrainingLog,
    pub library_version: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint, sidecar: &CheckpointSidecar) -> Result<()> {
    if sidecar.fingerprint != to_hex(&ck.fingerprint()) {
        return Err(HarnessError::format(
            path,
            "sidecar fingerprint does not describe this checkpoint",
        ));
    }
    write_atomic(path, &ck.to_bytes())?;
    write_json(&sidecar_path(path), sidecar)
}

/// Read both files and check the sidecar's fingerprints against the bytes.
pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointSidecar)> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let sidecar: CheckpointSidecar = read_json(&sidecar_path(path))?;
    if sidecar.fingerprint != to_hex(&ck.fingerprint()) {
        return Err(HarnessError::format(
            path,
            "checkpoint bytes do not match the sidecar fingerprint",
        ));
    }
    if sidecar.encoder_fingerprint != to_hex(&ck.encoder) || sidecar.encoder.fingerprint() != ck.encoder {
        return Err(HarnessError::format(
            path,
            "sidecar encoder does not match the checkpoint",
        ));
    }
    Ok((ck, sidecar))
}
