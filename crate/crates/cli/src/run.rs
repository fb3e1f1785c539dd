//! Run directories: resolved config, append-only manifest, content hashes
//! and upstream checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unipart_core::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Latest recorded hash of an output file name.
    pub fn output_hash(&self, name: &str) -> Option<&str> {
        self.entries.iter().rev().flat_map(|e| &e.outputs).find(|f| f.path == name).map(|f| f.sha256.as_str())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checks that an upstream artifact exists and still matches the hash its
/// producing stage recorded. `command` names the stage that makes it.
pub fn require(path: &Path, command: &str) -> Result<FileHash> {
    if !path.exists() {
        bail!("{} not found; run `unipart {command}` first", path.display());
    }
    let sha256 = sha256_file(path)?;
    if let (Some(dir), Some(name)) = (path.parent(), path.file_name()) {
        let manifest = RunManifest::read(dir)?;
        if let Some(recorded) = manifest.output_hash(&name.to_string_lossy()) {
            if recorded != sha256 {
                bail!("{} changed since it was written; re-run `unipart {command}`", path.display());
            }
        }
    }
    Ok(FileHash { path: path.display().to_string(), sha256 })
}

/// Loads the config file if given, else the defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::read(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// One stage invocation writing into `dir`.
pub struct Stage {
    name: String,
    dir: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<String>,
    metrics: BTreeMap<String, f64>,
    start: Instant,
}

impl Stage {
    pub fn begin(name: &str, dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let stage = Stage {
            name: name.into(),
            dir: dir.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            start: Instant::now(),
        };
        config.write(&stage.path(CONFIG))?;
        Ok(stage)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, hash: FileHash) {
        self.inputs.push(hash);
    }

    /// Records a file written into the stage directory.
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.into());
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Verifies inputs were not modified, hashes outputs and appends the
    /// manifest entry.
    pub fn finish(self) -> Result<()> {
        for i in &self.inputs {
            if sha256_file(Path::new(&i.path))? != i.sha256 {
                bail!("input {} changed while `{}` ran", i.path, self.name);
            }
        }
        let mut outputs = vec![FileHash { path: CONFIG.into(), sha256: sha256_file(&self.path(CONFIG))? }];
        for name in &self.outputs {
            outputs.push(FileHash { path: name.clone(), sha256: sha256_file(&self.path(name))? });
        }
        let mut manifest = RunManifest::read(&self.dir)?;
        manifest.entries.push(ManifestEntry {
            stage: self.name.clone(),
            inputs: self.inputs,
            outputs,
            metrics: self.metrics,
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        });
        fs::write(self.dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        log::info!("{} finished; artifacts in {}", self.name, self.dir.display());
        Ok(())
    }
}
