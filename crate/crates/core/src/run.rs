//! Run directories: manifest of produced artifacts and a writer lock.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// paths relative to the run directory
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub source_revision: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: &str, config: &ExperimentConfig, source_revision: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            config_hash: config.hash_hex(),
            source_revision: source_revision.to_string(),
            seeds: BTreeMap::from([
                ("experiment".to_string(), config.seed),
                ("pretrain".to_string(), config.pretrain_config().seed),
                (
                    "fusion-init".to_string(),
                    seed::derive(config.seed, "fusion", 0),
                ),
                (
                    "train-noise".to_string(),
                    seed::derive(config.seed, "train-noise", 0),
                ),
                (
                    "test-noise".to_string(),
                    seed::derive(config.seed, "test-noise", 0),
                ),
            ]),
            stages: Vec::new(),
        }
    }

    /// Open the manifest of `dir`, or start one. An existing manifest for a
    /// different config is an error.
    pub fn open(
        dir: &Path,
        run_id: &str,
        config: &ExperimentConfig,
        source_revision: &str,
    ) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(run_id, config, source_revision));
        }
        let m: Self = serde_json::from_slice(&std::fs::read(&path)?)?;
        if m.config_hash != config.hash_hex() {
            return Err(Error::Corruption(format!(
                "run directory {} belongs to a different config",
                dir.display()
            )));
        }
        Ok(m)
    }

    /// Replace any earlier record of the same stage.
    pub fn record(&mut self, stage: &str, artifacts: Vec<String>, seconds: f64) {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            artifacts,
            seconds,
        });
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &str> {
        self.stages
            .iter()
            .flat_map(|s| s.artifacts.iter().map(String::as_str))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
