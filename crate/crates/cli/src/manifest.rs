//! Reproducibility record written next to every run's outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub variant: String,
    pub seed: u64,
    pub config_sha256: String,
    pub data_sha256: String,
    pub versions: BTreeMap<&'static str, String>,
    /// Output file name to content hash.
    pub artifacts: BTreeMap<String, String>,
    /// The effective configuration, overrides applied.
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str, variant: String, seed: u64, config_toml: String, data_sha256: String) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("bda", env!("CARGO_PKG_VERSION").to_string());
        versions.insert("checkpoint_format", "1".to_string());
        Self {
            command: command.into(),
            variant,
            seed,
            config_sha256: sha256_hex(config_toml.as_bytes()),
            data_sha256,
            versions,
            artifacts: BTreeMap::new(),
            config: config_toml,
        }
    }

    pub fn record(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let hash = sha256_file(&dir.join(name))?;
        self.artifacts.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(CliError::internal)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
    }
}
