//! Single-file tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `UNIPCKPT`                          |
//! | 8      | 4    | format version, `u32` (currently 1)       |
//! | 12     | 8    | manifest length `n` in bytes, `u64`       |
//! | 20     | n    | manifest, UTF-8 JSON                      |
//! | 20+n   | ...  | tensor payloads, raw `f64` LE, in manifest order |
//!
//! The manifest is `{"metadata": {string: string}, "tensors": [{"name",
//! "shape", "dtype": "f64"}]}`. Payload length must equal the sum of
//! `8 · numel` over all tensors; trailing or missing bytes are errors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UNIPCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            tensors: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from this checkpoint by name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut other = ParamStore::new();
        for (n, t) in &self.tensors {
            other.add(n.clone(), t.clone())?;
        }
        store.load_from(&other)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec(), dtype: "f64".into() })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(TensorError::Format("truncated header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(TensorError::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + mlen).ok_or_else(|| TensorError::Format("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| TensorError::Format(format!("manifest: {e}")))?;
        let mut offset = 20 + mlen;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            if entry.dtype != "f64" {
                return Err(TensorError::Format(format!("unsupported dtype {}", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            let end = offset + numel * 8;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| TensorError::Format(format!("truncated payload for `{}`", entry.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(TensorError::Format(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Checkpoint { metadata: manifest.metadata, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
