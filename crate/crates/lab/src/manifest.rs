//! Run manifests and output-directory locks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Started,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub metrics: serde_json::Value,
    pub error: Option<String>,
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        RunManifest {
            command: command.to_string(),
            status: Status::Started,
            seed,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            metrics: serde_json::Value::Null,
            error: None,
            wall_clock_secs: None,
        }
    }

    /// The manifest with wall-clock time removed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        RunManifest {
            wall_clock_secs: None,
            ..self.clone()
        }
    }

    pub fn write(&self, dir: &Path) -> LabResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> LabResult<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn sha256_file(path: &Path) -> LabResult<String> {
    let bytes = fs::read(path).map_err(|e| LabError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes `rel` under `dir`.
pub fn artifact(dir: &Path, rel: &str) -> LabResult<Artifact> {
    Ok(Artifact {
        path: rel.to_string(),
        sha256: sha256_file(&dir.join(rel))?,
    })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> LabResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            LabError::Config(format!("{} is in use by another run ({}: {e})", dir.display(), path.display()))
        })?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
