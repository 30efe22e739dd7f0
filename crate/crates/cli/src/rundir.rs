use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use ufema::config::ExperimentConfig;
use ufema::run::{RunLock, RunManifest, MANIFEST_FILE};

pub const SOURCE_REVISION: &str = match option_env!("UFEMA_SOURCE_REVISION") {
    Some(r) => r,
    None => concat!("ufema-", env!("CARGO_PKG_VERSION")),
};

pub fn runs_root() -> PathBuf {
    std::env::var_os("UFEMA_RUNS_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn data_root() -> PathBuf {
    std::env::var_os("UFEMA_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

pub fn run_name(explicit: Option<&str>, config: &Path) -> Result<String> {
    if let Some(r) = explicit {
        return Ok(r.to_string());
    }
    config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .context("cannot derive a run name from the config path")
}

/// Locked run directory with its manifest.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: RunManifest,
    _lock: RunLock,
}

impl RunDir {
    pub fn create(name: &str, config: &ExperimentConfig) -> Result<Self> {
        Self::open_at(&runs_root().join(name), name, config)
    }

    pub fn open_at(path: &Path, name: &str, config: &ExperimentConfig) -> Result<Self> {
        let lock = RunLock::acquire(path)?;
        let manifest = RunManifest::open(path, name, config, SOURCE_REVISION)?;
        config.save(path.join("config.toml"))?;
        let mut dir = Self {
            path: path.to_path_buf(),
            manifest,
            _lock: lock,
        };
        if dir.manifest.stages.is_empty() {
            dir.manifest
                .record("config", vec!["config.toml".into()], 0.0);
            dir.manifest.save(&dir.path)?;
        }
        Ok(dir)
    }

    /// The run directory enclosing `file`, located by its manifest.
    pub fn enclosing(file: &Path) -> Result<Self> {
        let start = file
            .canonicalize()
            .with_context(|| format!("cannot resolve {}", file.display()))?;
        let root = start
            .ancestors()
            .skip(1)
            .find(|d| d.join(MANIFEST_FILE).exists())
            .with_context(|| format!("{} is not inside a run directory", file.display()))?
            .to_path_buf();
        let config = ExperimentConfig::load(root.join("config.toml"))?;
        let name = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::open_at(&root, &name, &config)
    }

    pub fn file(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.path)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    pub fn record(&mut self, stage: &str, artifacts: Vec<String>, started: Instant) -> Result<()> {
        self.manifest
            .record(stage, artifacts, started.elapsed().as_secs_f64());
        self.manifest.save(&self.path)?;
        Ok(())
    }
}
