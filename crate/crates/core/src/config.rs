//! Run configuration: a TOML document selecting a preset or explicit
//! hyperparameters, a seed, and output paths. Unknown keys are rejected and
//! every named preset must resolve.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{preset, Preset, SchedulePlan, PRESET_NAMES};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown preset {0:?}; known presets: {}", PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error("config names neither a preset nor explicit hyperparameters")]
    NoHyperparameters,
    #[error("field {field}: {message}")]
    Field { field: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn default_seed() -> u64 {
    0
}

/// Merge-subcommand inputs: checkpoint paths and their weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    pub inputs: Vec<PathBuf>,
    pub weights: Vec<f64>,
}

/// Device-mesh extents for the cost model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    #[serde(default = "one")]
    pub dp: usize,
    #[serde(default = "one")]
    pub fsdp: usize,
    #[serde(default = "one")]
    pub sp: usize,
    #[serde(default = "one")]
    pub tp: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Name of a built-in preset; mutually exclusive with `hyperparameters`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Explicit hyperparameters, overriding any preset lookup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparameters: Option<Preset>,
    /// Optional training-length override (kept small for smoke runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            preset: None,
            hyperparameters: None,
            steps: None,
            batch_size: None,
            beta: None,
            merge: None,
            mesh: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        if let Some(name) = &cfg.preset {
            if preset(name).is_none() {
                return Err(ConfigError::UnknownPreset(name.clone()));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig is always serializable")
    }

    /// Resolves the effective hyperparameters: explicit block first, then the
    /// named preset.
    pub fn resolve(&self) -> Result<Preset> {
        if let Some(h) = &self.hyperparameters {
            h.schedule
                .validate()
                .map_err(|e| ConfigError::Field { field: "hyperparameters.schedule", message: e.to_string() })?;
            return Ok(h.clone());
        }
        match &self.preset {
            Some(name) => preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone())),
            None => Err(ConfigError::NoHyperparameters),
        }
    }

    /// The effective schedule with the optional step-count override applied.
    pub fn schedule(&self) -> Result<SchedulePlan> {
        let mut plan = self.resolve()?.schedule;
        if let Some(steps) = self.steps {
            plan.steps = steps;
            plan.validate()
                .map_err(|e| ConfigError::Field { field: "steps", message: e.to_string() })?;
        }
        Ok(plan)
    }
}
