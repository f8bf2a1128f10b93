//! Checkpoint archives: model configuration, named parameter tensors,
//! optimizer moments and run metadata in one versioned binary file.
//!
//! Layout after the common header: fingerprint string, metadata JSON string,
//! tensor count and tensors (name, kind byte, rows, cols, `f64` values),
//! then an optimizer flag byte followed by step and moment tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{read_file, write_atomic, Decoder, Encoder};
use crate::model::ModelConfig;
use crate::optim::AdamState;
use crate::params::{ParamKind, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSQCKPT\0";
pub const CHECKPOINT_VERSION: (u16, u16) = (1, 0);

/// Hex SHA-256 of the canonical JSON form of a model configuration.
pub fn fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: u64,
    pub best_step: u64,
    pub best_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.meta.model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        e.str(&self.fingerprint());
        e.str(&serde_json::to_string(&self.meta).expect("metadata serializes"));
        e.u32(self.params.len() as u32);
        for entry in self.params.entries() {
            e.str(&entry.name);
            e.u8(match entry.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            e.matrix_f64(&entry.value);
        }
        match &self.optimizer {
            None => e.u8(0),
            Some(state) => {
                e.u8(1);
                e.u64(state.step);
                e.u32(state.first.len() as u32);
                for m in state.first.iter().chain(&state.second) {
                    e.matrix_f64(m);
                }
            }
        }
        e.buf
    }

    /// Parses and checks the whole archive; nothing is returned on any
    /// inconsistency.
    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, context);
        d.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let stored = d.str()?;
        let meta_json = d.str()?;
        let meta: CheckpointMeta =
            serde_json::from_str(&meta_json).map_err(|e| d.error(format!("metadata: {e}")))?;
        if fingerprint(&meta.model) != stored {
            return Err(d.error("config fingerprint does not match the embedded configuration"));
        }
        let count = d.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = d.str()?;
            let kind = match d.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                other => return Err(d.error(format!("tensor {name}: bad kind byte {other}"))),
            };
            let value = d.matrix_f64()?;
            if params.id(&name).is_some() {
                return Err(d.error(format!("duplicate tensor {name}")));
            }
            params.insert(name, kind, value);
        }
        let optimizer = match d.u8()? {
            0 => None,
            1 => {
                let step = d.u64()?;
                let n = d.u32()? as usize;
                let first = (0..n).map(|_| d.matrix_f64()).collect::<Result<Vec<_>>>()?;
                let second = (0..n).map(|_| d.matrix_f64()).collect::<Result<Vec<_>>>()?;
                let state = AdamState { step, first, second };
                state.validate(&params).map_err(|e| d.error(e.to_string()))?;
                Some(state)
            }
            other => return Err(d.error(format!("bad optimizer flag {other}"))),
        };
        d.finish()?;
        Ok(Self { meta, params, optimizer })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    /// Copies every tensor into `store` after checking the fingerprint and
    /// that names, kinds and shapes agree exactly.
    pub fn load_into(&self, config: &ModelConfig, store: &mut ParamStore) -> Result<()> {
        if fingerprint(config) != self.fingerprint() {
            return Err(Error::Incompatible("checkpoint was written for a different model configuration".into()));
        }
        if store.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (mine, theirs) in store.entries().iter().zip(self.params.entries()) {
            if mine.name != theirs.name || mine.kind != theirs.kind || mine.value.dim() != theirs.value.dim() {
                return Err(Error::Incompatible(format!(
                    "tensor {} {:?} does not match checkpoint tensor {} {:?}",
                    mine.name,
                    mine.value.dim(),
                    theirs.name,
                    theirs.value.dim()
                )));
            }
        }
        *store = self.params.clone();
        Ok(())
    }
}
