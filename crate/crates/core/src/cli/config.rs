use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::GridSpec;
use crate::error::{io_at, Error, Result};
use crate::hyperopt::{SearchConfig, SearchSpace};
use crate::synthgen::GeneratorConfig;
use crate::training::TrainConfig;
use crate::twinvae::ModelConfig;

pub const SEED_ENV: &str = "TWINCOUNT_SEED";
pub const RUN_RECORD: &str = "run.json";
pub const LOCK_FILE: &str = ".lock";

/// Dataset and output locations. Relative paths resolve against the working
/// directory, not the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub syn: Option<PathBuf>,
    pub nat: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoConfig {
    pub budget: usize,
    pub space: SearchSpace,
    pub search: SearchConfig,
}

impl Default for HpoConfig {
    fn default() -> Self {
        HpoConfig {
            budget: 20,
            space: SearchSpace::default(),
            search: SearchConfig::default(),
        }
    }
}

/// Everything a subcommand reads. Every section is optional in the file and
/// falls back to its defaults; unknown keys are rejected at any depth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hpo: HpoConfig,
    /// `None` uses the default grid for the data's style.
    pub grid: Option<GridSpec>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.hpo.space.validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    /// Flag, then config file, then `TWINCOUNT_SEED`, then zero.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }
}

/// Provenance written to `run.json`. Holds no timestamps so repeated runs
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub code_version: String,
    pub config: RunConfig,
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, config: &RunConfig) -> Self {
        RunRecord {
            command: command.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(RUN_RECORD), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    /// Creates `dir` if needed. Fails with [`Error::Locked`] while another
    /// holder exists.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(RunLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
