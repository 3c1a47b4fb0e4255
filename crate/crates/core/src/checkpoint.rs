//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   CheckpointManifest
//! <dir>/params.bin      parameters, f64 little-endian
//! <dir>/optimizer.bin   AdamW first then second moments, f64 little-endian
//! ```
//!
//! Every blob's length and SHA-256 are recorded in the manifest and
//! verified on load; any mismatch is a [`Error::CorruptCheckpoint`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, TreeConfig};
use crate::error::{Error, Result};
use crate::model::{DenoiserConfig, DenoiserState};
use crate::schedule::ScheduleParams;
use crate::storage::{create_dir, write_json};
use crate::train::AdamW;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const OPTIMIZER: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub denoiser_config: DenoiserConfig,
    pub schedule_params: ScheduleParams,
    pub tree: TreeConfig,
    pub d_test: usize,
    pub normalization_constant: f64,
    pub training_step: u64,
    pub seed: u64,
    pub param_count: usize,
    pub params_sha256: String,
    pub optimizer: Option<OptimizerRecord>,
    pub val_rmse: Option<f64>,
    pub config_hash: String,
}

/// Everything recovered from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub state: DenoiserState,
    pub optimizer: Option<AdamW>,
}

fn to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes a checkpoint. `manifest.param_count`, `params_sha256` and
/// `optimizer` are filled in from `state` and `optimizer`.
pub fn save(
    dir: &Path,
    mut manifest: CheckpointManifest,
    state: &DenoiserState,
    optimizer: Option<&AdamW>,
) -> Result<PathBuf> {
    create_dir(dir)?;
    let params = to_bytes(state.params());
    manifest.format_version = FORMAT_VERSION;
    manifest.denoiser_config = state.config().clone();
    manifest.param_count = state.num_params();
    manifest.params_sha256 = digest(&params);
    write_blob(&dir.join(PARAMS), &params)?;
    manifest.optimizer = match optimizer {
        Some(opt) => {
            let mut moments = opt.first_moment().to_vec();
            moments.extend_from_slice(opt.second_moment());
            let bytes = to_bytes(&moments);
            write_blob(&dir.join(OPTIMIZER), &bytes)?;
            Some(OptimizerRecord {
                step: opt.step_count(),
                len: opt.first_moment().len(),
                sha256: digest(&bytes),
            })
        }
        None => None,
    };
    // Manifest last: a directory with a manifest is complete.
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(dir.to_path_buf())
}

fn write_blob(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(dir: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_verified(dir: &Path, name: &str, sha: &str, len: usize) -> Result<Vec<f64>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| corrupt(dir, format!("{name}: {e}")))?;
    if bytes.len() != len * 8 {
        return Err(corrupt(
            dir,
            format!("{name} holds {} bytes, expected {}", bytes.len(), len * 8),
        ));
    }
    if digest(&bytes) != sha {
        return Err(corrupt(dir, format!("{name} checksum mismatch")));
    }
    Ok(from_bytes(&bytes))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Data(format!(
            "no checkpoint at {} (missing {MANIFEST}; run train first)",
            dir.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| corrupt(dir, format!("{MANIFEST}: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            dir,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let params = read_verified(dir, PARAMS, &manifest.params_sha256, manifest.param_count)?;
    let state = DenoiserState::from_params(manifest.denoiser_config.clone(), params)
        .map_err(|e| corrupt(dir, e.to_string()))?;
    let optimizer = match &manifest.optimizer {
        Some(rec) => {
            if rec.len != manifest.param_count {
                return Err(corrupt(dir, "optimizer state size differs from parameters"));
            }
            let moments = read_verified(dir, OPTIMIZER, &rec.sha256, 2 * rec.len)?;
            let (m, v) = moments.split_at(rec.len);
            Some(AdamW::from_state(m.to_vec(), v.to_vec(), rec.step))
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        state,
        optimizer,
    })
}
