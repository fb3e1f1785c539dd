//! Model checkpoints: tensors plus `kind` and JSON `config` metadata.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use unipart_tensor::{Checkpoint, ParamStore, Tensor};

use crate::error::{Error, Result};

pub fn to_checkpoint<C: Serialize>(kind: &str, config: &C, store: &ParamStore) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(store);
    ck.metadata.insert("kind".into(), kind.into());
    ck.metadata.insert("config".into(), serde_json::to_string(config)?);
    Ok(ck)
}

pub fn save<C: Serialize>(path: &Path, kind: &str, config: &C, store: &ParamStore) -> Result<()> {
    to_checkpoint(kind, config, store)?.write(path)?;
    Ok(())
}

/// Reads a checkpoint, checking its kind, and parses its config.
pub fn load<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    from_checkpoint(ck, kind)
}

pub fn from_checkpoint<C: DeserializeOwned>(ck: Checkpoint, kind: &str) -> Result<(C, Checkpoint)> {
    match ck.metadata.get("kind") {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", other.map_or("none", |s| s))));
        }
    }
    let cfg = ck.metadata.get("config").ok_or_else(|| Error::Format("checkpoint has no config".into()))?;
    Ok((serde_json::from_str(cfg)?, ck))
}

pub const LATENT_KIND: &str = "latent";

/// Stores a single `[L × d]` latent set as a checkpoint.
pub fn save_latent(path: &Path, z: &Tensor) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.metadata.insert("kind".into(), LATENT_KIND.into());
    ck.tensors.push(("latent".into(), z.clone()));
    Ok(ck.write(path)?)
}

pub fn load_latent(path: &Path) -> Result<Tensor> {
    let ck = Checkpoint::read(path)?;
    if ck.metadata.get("kind").map(String::as_str) != Some(LATENT_KIND) {
        return Err(Error::Format(format!("{} is not a latent file", path.display())));
    }
    ck.get("latent").cloned().ok_or_else(|| Error::Format("latent file has no tensor".into()))
}
