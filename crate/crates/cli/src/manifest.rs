//! Run manifests recording what a command was given and what it wrote.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FORMAT: &str = "mdmoe-manifest";

#[derive(Debug, Clone, Serialize)]
pub struct Artifact {
    pub path: String,
    pub role: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format: &'static str,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub data_fingerprints: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            format: MANIFEST_FORMAT,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            config,
            data_fingerprints: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn fingerprint(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path)?;
        self.data_fingerprints.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<String>, role: &str) {
        self.artifacts.push(Artifact {
            path: path.into(),
            role: role.to_string(),
        });
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut file = std::fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file
            .read(&mut buf)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
