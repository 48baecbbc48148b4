//! Run configuration, read from TOML. Every field has a default; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::DenoiserConfig;
use crate::geometry::RingSpec;
use crate::scheduler::ScheduleSpec;
use crate::synthdata::ObjectParams;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("rendering config: {0}")]
    Render(#[from] toml::ser::Error),
    #[error("inconsistent config: {0}")]
    Invalid(String),
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training objects.
    pub count: usize,
    pub seed: u64,
    /// Held-out objects, generated with `eval_seed`.
    pub eval_count: usize,
    pub eval_seed: u64,
    pub objects: ObjectParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 256,
            seed: 0,
            eval_count: 16,
            eval_seed: 1_000_003,
            objects: ObjectParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// DDIM steps.
    pub steps: usize,
    /// Instances per input.
    pub seeds: usize,
    /// Seed of the first instance; instance `k` uses `first_seed + k`.
    pub first_seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            seeds: 4,
            first_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub eval_data: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data/train.bin".into(),
            eval_data: "data/eval.bin".into(),
            runs: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ring: RingSpec,
    pub schedule: ScheduleSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// The reduced configuration: 64 objects and 1000 steps.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data.count = 64;
        c.train.steps = 1000;
        c.train.checkpoint_every = 250;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.model.timesteps != self.schedule.steps {
            return bad(format!(
                "model.timesteps = {} but schedule.steps = {}",
                self.model.timesteps, self.schedule.steps
            ));
        }
        if self.model.image_size != self.ring.image_size {
            return bad(format!(
                "model.image_size = {} but ring.image_size = {}",
                self.model.image_size, self.ring.image_size
            ));
        }
        if self.model.uses_volume() && self.model.volume.views != self.ring.views {
            return bad(format!(
                "model.volume.views = {} but ring.views = {}",
                self.model.volume.views, self.ring.views
            ));
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.schedule.steps || self.sampling.seeds == 0 {
            return bad("sampling.steps must be in 1..=schedule.steps and sampling.seeds positive".into());
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
