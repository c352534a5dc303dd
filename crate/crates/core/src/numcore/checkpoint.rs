//! Checkpoint files.
//!
//! Layout: the magic bytes `PVRF1`, a newline, one line of compact JSON
//! metadata ([`CheckpointMeta`]), a newline, then every tensor listed in the
//! metadata as flat little-endian `f32`, in metadata order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::param::ParamStore;
use crate::numcore::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PVRF1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Model kind, e.g. `posterior` or `flow`.
    pub kind: String,
    /// Hash of the configuration that produced the weights.
    pub config_hash: String,
    /// Model architecture and any extra provenance.
    pub model: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: &str, model: serde_json::Value, params: ParamStore<f32>) -> Self {
        let tensors = params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                kind: kind.to_string(),
                config_hash: config_hash.to_string(),
                model,
                tensors,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(b'\n');
        serde_json::to_writer(&mut out, &self.meta)?;
        out.push(b'\n');
        for entry in &self.meta.tensors {
            let id = self
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", entry.name)))?;
            for v in self.params.value(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC || bytes[MAGIC.len()] != b'\n' {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let rest = &bytes[MAGIC.len() + 1..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unterminated metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&rest[..nl])?;
        let mut payload = &rest[nl + 1..];
        let mut params = ParamStore::new();
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            if payload.len() < 4 * n {
                return Err(Error::Checkpoint(format!("truncated tensor `{}`", entry.name)));
            }
            let data = payload[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[4 * n..];
            params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        }
        if !payload.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless the checkpoint was produced under `expected` config hash.
    pub fn require_hash(&self, expected: &str) -> Result<()> {
        if self.meta.config_hash != expected {
            return Err(Error::ConfigMismatch {
                expected: expected.to_string(),
                found: self.meta.config_hash.clone(),
            });
        }
        Ok(())
    }
}
