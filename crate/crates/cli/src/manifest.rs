//! Provenance record written next to each command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, Value>,
    pub seed: u64,
    /// Input path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub elapsed_ms: u128,
}

pub struct Recorder {
    started: Instant,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config: BTreeMap::new(),
                seed,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                elapsed_ms: 0,
            },
        }
    }

    pub fn config(&mut self, key: &str, value: impl Serialize) -> Result<(), Failure> {
        self.manifest.config.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let digest = Sha256::digest(&bytes);
        let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.manifest.inputs.insert(path.display().to_string(), hex);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(mut self, path: &Path) -> Result<PathBuf, Failure> {
        self.manifest.elapsed_ms = self.started.elapsed().as_millis();
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        Ok(path.to_path_buf())
    }
}

/// `<output>.manifest.json`.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
