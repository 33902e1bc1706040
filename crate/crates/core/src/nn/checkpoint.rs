//! Checkpoint = raw weights blob plus a JSON sidecar of the same stem.
//!
//! Blob layout (little-endian): 8-byte magic, 64-byte hex config hash,
//! parameter count and buffer count as `u64`, then all parameters and all
//! buffers as `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, SegModel};
use crate::fsutil::{from_json_slice, to_json_pretty, write_atomic};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ATBSEGW1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    /// Epoch (1-based) at which these weights were taken; 0 if untrained.
    pub epoch: usize,
    pub val_loss: Option<f64>,
    pub val_dice: Option<[f64; 3]>,
    pub weights_sha256: String,
}

impl CheckpointMeta {
    pub fn new(config: &ModelConfig, seed: u64, epoch: usize) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            seed,
            epoch,
            val_loss: None,
            val_dice: None,
            weights_sha256: String::new(),
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn encode(model: &SegModel<f32>) -> Vec<u8> {
    let (p, b) = (model.params(), model.buffers());
    let mut out = Vec::with_capacity(88 + 4 * (p.len() + b.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(model.config().hash().as_bytes());
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    for v in p.iter().chain(b) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write `path` (weights) and its `.json` sidecar. `meta.config_hash` and
/// `meta.weights_sha256` are filled in from the model. Returns the stored
/// metadata.
pub fn save_checkpoint(
    path: &Path,
    model: &SegModel<f32>,
    meta: &CheckpointMeta,
) -> Result<CheckpointMeta, ModelError> {
    let blob = encode(model);
    let mut meta = meta.clone();
    meta.schema_version = CHECKPOINT_SCHEMA_VERSION;
    meta.config = model.config().clone();
    meta.config_hash = model.config().hash();
    meta.weights_sha256 = hex::encode(Sha256::digest(&blob));
    write_atomic(path, &blob).map_err(io(path))?;
    let side = sidecar(path);
    write_atomic(&side, &to_json_pretty(&meta)).map_err(io(&side))?;
    Ok(meta)
}

/// Read a checkpoint's sidecar only.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, ModelError> {
    let side = sidecar(path);
    let bytes = fs::read(&side).map_err(io(&side))?;
    let meta: CheckpointMeta = from_json_slice(&bytes).map_err(|e| {
        ModelError::Checkpoint(format!(
            "{}: {} at {}",
            side.display(),
            e.message,
            e.pointer
        ))
    })?;
    if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "{}: schema version {} not supported",
            side.display(),
            meta.schema_version
        )));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(ModelError::Checkpoint(format!(
            "{}: config hash does not match the stored config",
            side.display()
        )));
    }
    Ok(meta)
}

/// Load and validate a checkpoint: sidecar config hash, blob magic, blob
/// config hash, and weights digest must all agree.
pub fn load_checkpoint(path: &Path) -> Result<(SegModel<f32>, CheckpointMeta), ModelError> {
    let meta = read_checkpoint_meta(path)?;
    let blob = fs::read(path).map_err(io(path))?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    if blob.len() < 88 || &blob[..8] != MAGIC {
        return Err(bad("not a weights file"));
    }
    if blob[8..72] != *meta.config_hash.as_bytes() {
        return Err(bad("config hash does not match sidecar"));
    }
    if hex::encode(Sha256::digest(&blob)) != meta.weights_sha256 {
        return Err(bad("weights digest does not match sidecar"));
    }
    let np = u64::from_le_bytes(blob[72..80].try_into().expect("8 bytes")) as usize;
    let nb = u64::from_le_bytes(blob[80..88].try_into().expect("8 bytes")) as usize;
    let body = &blob[88..];
    if body.len() != 4 * (np + nb) {
        return Err(bad("truncated weights"));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (p, b) = values.split_at(np);
    let model = SegModel::from_parts(meta.config.clone(), p.to_vec(), b.to_vec())?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn model() -> SegModel<f32> {
        SegModel::new(
            ModelConfig::new(Architecture::UnetStyle, 16, 16)
                .with_stages(2)
                .with_base_channels(4)
                .with_seed(3),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        let mut meta = CheckpointMeta::new(m.config(), 3, 7);
        meta.val_loss = Some(0.25);
        let stored = save_checkpoint(&path, &m, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.buffers(), m.buffers());
        assert_eq!(meta2, stored);
        assert_eq!(meta2.epoch, 7);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        save_checkpoint(&path, &m, &CheckpointMeta::new(m.config(), 3, 1)).unwrap();
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side)
            .unwrap()
            .replace("\"base_channels\": 4", "\"base_channels\": 8");
        fs::write(&side, text).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("config hash"), "{err}");
    }

    #[test]
    fn corrupted_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = model();
        save_checkpoint(&path, &m, &CheckpointMeta::new(m.config(), 3, 1)).unwrap();
        let mut blob = fs::read(&path).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 1;
        fs::write(&path, blob).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
