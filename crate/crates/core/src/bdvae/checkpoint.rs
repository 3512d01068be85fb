//! Checkpoint container.
//!
//! Layout: 8-byte magic `BDVAECK1`, little-endian u64 header length, UTF-8
//! JSON header, then every parameter as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Architecture, BdvaeModel};
use crate::datamodel::write_atomic;
use crate::ndmath::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BDVAECK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Corrupt(String),
    #[error("checkpoint masks {found} do not match current masks {expected}")]
    MaskMismatch { expected: String, found: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    mask_fingerprint: String,
    epoch: Option<usize>,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BdvaeModel,
    pub mask_fingerprint: String,
    /// Epoch the parameters come from, if produced by training.
    pub epoch: Option<usize>,
    /// Echo of the configuration that produced the model.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            architecture: self.model.arch.clone(),
            mask_fingerprint: self.mask_fingerprint.clone(),
            epoch: self.epoch,
            config: self.config.clone(),
            params: self
                .model
                .names()
                .iter()
                .zip(self.model.params())
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.n_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut payload = &bytes[16 + hlen..];
        let mut names = Vec::with_capacity(header.params.len());
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let len: usize = entry.shape.iter().product();
            if payload.len() < 8 * len {
                return Err(corrupt("truncated parameter payload"));
            }
            let (chunk, rest) = payload.split_at(8 * len);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(
                Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
            );
            names.push(entry.name);
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let expected = header.architecture.param_shapes();
        if expected.len() != names.len()
            || expected
                .iter()
                .zip(names.iter().zip(&params))
                .any(|((n, s), (m, p))| n != m || s.as_slice() != p.shape())
        {
            return Err(corrupt("parameter directory does not match the architecture"));
        }
        Ok(Self {
            model: BdvaeModel::from_parts(header.architecture, names, params),
            mask_fingerprint: header.mask_fingerprint,
            epoch: header.epoch,
            config: header.config,
        })
    }

    /// Fails unless the checkpoint was trained against masks with this
    /// fingerprint.
    pub fn expect_masks(&self, fingerprint: &str) -> Result<(), CheckpointError> {
        if self.mask_fingerprint != fingerprint {
            return Err(CheckpointError::MaskMismatch {
                expected: fingerprint.to_string(),
                found: self.mask_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    write_atomic(path, &ckpt.to_bytes()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
