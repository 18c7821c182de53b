//! Experiment configuration: one TOML file drives every command.
//!
//! Unknown keys are rejected so typos fail loudly before any work starts.
//! Command-line flags only override individual keys (`--seed`, `--out`);
//! the file remains the source of truth for reproducibility.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvSizes, MisalignmentSpec};
use crate::error::VstarError;
use crate::train::LoopConfig;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub fraction: f64,
    pub quantile: f64,
    pub seed: u64,
    pub sizes: EnvSizes,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            fraction: 0.5,
            quantile: 0.25,
            seed: 17,
            sizes: EnvSizes::default(),
        }
    }
}

impl EnvConfig {
    pub fn spec(&self) -> MisalignmentSpec {
        MisalignmentSpec {
            fraction: self.fraction,
            quantile: self.quantile,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        self.sizes.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output directory; relative paths are resolved under `$VSTAR_OUT` when
    /// that variable is set.
    pub output_dir: PathBuf,
    /// Environment bundle file name inside the output directory.
    pub env_file: String,
    /// One full run per seed.
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub train: LoopConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs"),
            env_file: "env.json".into(),
            seeds: vec![1, 2, 3, 4, 5],
            env: EnvConfig::default(),
            train: LoopConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| VstarError::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            VstarError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| VstarError::Internal(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate(self.env.sizes.sid_len)?;
        if self.seeds.is_empty() {
            return Err(VstarError::Config("seed list must be non-empty".into()));
        }
        if self.env_file.is_empty() {
            return Err(VstarError::Config("env_file must be non-empty".into()));
        }
        Ok(())
    }

    /// Output directory with the `$VSTAR_OUT` root applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("VSTAR_OUT") {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn env_path(&self) -> PathBuf {
        self.resolved_output_dir().join(&self.env_file)
    }
}
