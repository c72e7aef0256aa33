//! Run configuration: architecture choice, numeric precision, trainer
//! hyperparameters, and sampling policy, read fail-closed from JSON
//! (unknown keys anywhere are errors).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{preset, ArchitectureSpec};
use crate::train::{SamplingOptions, TrainConfig};

/// Numeric precision of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Architecture selection: a preset name (`"hyperdense-2mod"`) or an inline
/// architecture object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice {
    Preset(String),
    Inline(ArchitectureSpec),
}

impl ArchChoice {
    pub fn resolve(&self) -> Result<ArchitectureSpec> {
        match self {
            ArchChoice::Preset(name) => preset(name),
            ArchChoice::Inline(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

/// Everything a training run needs beyond the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchChoice,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<ArchitectureSpec> {
        let spec = self.arch.resolve()?;
        self.train.validate()?;
        Ok(spec)
    }
}

/// Read and validate a run configuration file.
pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    config.validate()?;
    Ok(config)
}
