//! Run configuration, read from TOML and overridden by command-line flags.

use std::path::{Path, PathBuf};

use gestdtr_core::loglinear::IrlsOptions;
use gestdtr_core::select::{Criterion, Direction, SelectionOptions, StagePlan};
use gestdtr_core::simulation::{Analysis, Preset, Scenario, Stage2Policy};
use gestdtr_core::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 20_190_501;
pub const DEFAULT_REPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Fit,
    Select,
    Regime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Standard output when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default = "default_direction")]
    pub direction: Direction,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// One plan per stage, stage 1 first. When absent every stage searches
    /// over the terms of its blip model in the spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plans: Option<Vec<StagePlan>>,
}

fn default_direction() -> Direction {
    Direction::Backward
}

fn default_criterion() -> Criterion {
    Criterion::Qic
}

fn default_alpha() -> f64 {
    0.05
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            direction: default_direction(),
            criterion: default_criterion(),
            alpha: default_alpha(),
            plans: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_policy: Option<Stage2Policy>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub irls: IrlsOptions,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    /// A custom scenario, used by `simulate` when no preset is named.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    /// Analysis of the custom scenario; estimation under the scenario's
    /// default models when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<Analysis>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn reps(&self) -> usize {
        self.reps.unwrap_or(DEFAULT_REPS)
    }

    pub fn selection_options(&self) -> SelectionOptions {
        SelectionOptions {
            direction: self.selection.direction,
            criterion: self.selection.criterion,
            alpha: self.selection.alpha,
            irls: self.irls,
        }
    }

    pub fn require_spec(&self) -> Result<&ModelSpec, CliError> {
        self.spec
            .as_ref()
            .ok_or_else(|| CliError::Config("a model spec is required (`[spec]` in the config or --spec)".into()))
    }

    pub fn require_dataset(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Config("a dataset is required (`dataset` in the config or --data)".into()))
    }
}

/// Reads a model spec from TOML, or JSON when the file ends in `.json`.
pub fn load_spec(path: &Path) -> Result<ModelSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
