use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::config::ExperimentConfig;

/// Record of one run: config hash, produced files and phase timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    /// Artifact name to path, relative to the run directory.
    pub files: BTreeMap<String, PathBuf>,
    pub wall_clock_seconds: BTreeMap<String, f64>,
    pub results: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_toml().as_bytes()))
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config_sha256: config_hash(cfg),
            seed: cfg.seed,
            files: BTreeMap::new(),
            wall_clock_seconds: BTreeMap::new(),
            results: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    /// Records `path` under `name`, relative to `dir` when possible.
    pub fn add_file(&mut self, name: &str, path: &Path, dir: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path).to_path_buf();
        self.files.insert(name.to_string(), rel);
    }

    /// Writes `manifest.toml` into `dir` after checking that every listed file exists.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (name, rel) in &self.files {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(Error::State(format!(
                    "manifest entry `{name}` points to missing {}",
                    p.display()
                )));
            }
        }
        let path = dir.join("manifest.toml");
        let text = toml::to_string(self).map_err(|e| Error::State(format!("manifest: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::State(format!("manifest {}: {e}", path.display())))
    }
}
