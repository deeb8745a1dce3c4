//! Versioned JSON checkpoints for trained network weights.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which network a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    PgdNet,
    AoNet,
}

/// Weights plus the hash of the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub params: P,
    /// Per-epoch training loss.
    pub train_loss: Vec<f64>,
}

/// SHA-256 of the compact JSON encoding, hex encoded.
///
/// `serde_json` emits struct fields in declaration order, so equal values
/// hash equally.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl<P: Serialize + DeserializeOwned> Checkpoint<P> {
    pub fn new(kind: CheckpointKind, config_hash: String, params: P, train_loss: Vec<f64>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind,
            config_hash,
            params,
            train_loss,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads a checkpoint and checks its version and kind.
    pub fn load(path: &Path, kind: CheckpointKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Format(format!("checkpoint {} not found", path.display()))
            }
            _ => Error::Io(e),
        })?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                ck.kind
            )));
        }
        Ok(ck)
    }
}
