//! Experiment configuration: a named profile, optionally overridden by a TOML
//! file. The file may set any subset of keys; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! [train]
//! batch_size = 4
//! [sweep]
//! gammas = [1.3, 1.5]
//! ```

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sievae_core::model::AeConfig;
use sievae_core::phantom::{DatasetCounts, LesionSpec, PhantomSpec};
use sievae_core::trainer::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown profile `{0}` (expected `desk` or `paper`)")]
    UnknownProfile(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(ConfigError::UnknownProfile(other.into())),
        }
    }
}

/// Which cells a sweep runs. Every seed gets one baseline cell per impurity
/// ratio (when `baseline` is set) and one removal cell per (ratio, gamma).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub impurity_ratios: Vec<f64>,
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Master seed for single-cell commands.
    pub seed: u64,
    pub counts: DatasetCounts,
    pub phantom: PhantomSpec,
    pub lesion: LesionSpec,
    pub model: AeConfig,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    /// Save a checkpoint every this many epochs; 0 keeps only the final model.
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let sweep = SweepSpec {
            impurity_ratios: vec![0.0, 0.03, 0.06, 0.12],
            gammas: vec![1.30, 1.35, 1.40, 1.45, 1.50],
            seeds: vec![1, 2, 3, 4, 5],
            baseline: true,
        };
        match profile {
            Profile::Desk => Self {
                profile,
                seed: 1,
                counts: DatasetCounts::desk(),
                phantom: PhantomSpec::desk(),
                lesion: LesionSpec::desk(),
                model: AeConfig::desk(),
                train: TrainConfig::desk(),
                sweep,
                checkpoint_every: 0,
            },
            Profile::Paper => Self {
                profile,
                seed: 1,
                counts: DatasetCounts::paper(),
                phantom: PhantomSpec::with_shape([64, 77, 66]),
                lesion: LesionSpec::paper(),
                model: AeConfig::paper(),
                train: TrainConfig::paper(),
                sweep,
                checkpoint_every: 50,
            },
        }
    }

    /// Profile defaults with `overrides` (TOML text) merged on top. A
    /// `profile` key in the text selects the base profile when `profile` is
    /// `None`.
    pub fn from_toml(profile: Option<Profile>, overrides: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(overrides).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let named = match user.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(other) => return Err(ConfigError::Parse(format!("profile must be a string, got {other}"))),
            None => None,
        };
        let base = Self::profile(profile.or(named).unwrap_or(Profile::Desk));
        let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, user, "")?;
        if let Some(p) = profile {
            merged.insert("profile".into(), toml::Value::try_from(p).expect("profile serializes"));
        }
        let config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(profile: Option<Profile>, path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => {
                let config = Self::profile(profile.unwrap_or(Profile::Desk));
                config.validate()?;
                Ok(config)
            }
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                Self::from_toml(profile, &text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.phantom.validate().map_err(|e| invalid(&e))?;
        self.lesion.validate_for(&self.phantom).map_err(|e| invalid(&e))?;
        self.model.plan().map_err(|e| invalid(&e))?;
        if self.model.input_shape != self.phantom.shape {
            return Err(ConfigError::Invalid(format!(
                "model input shape {:?} differs from phantom shape {:?}",
                self.model.input_shape, self.phantom.shape
            )));
        }
        TrainConfig {
            removal_enabled: false,
            ..self.train.clone()
        }
        .validate()
        .map_err(|e| invalid(&e))?;
        for &gamma in &self.sweep.gammas {
            TrainConfig {
                gamma,
                removal_enabled: true,
                ..self.train.clone()
            }
            .validate()
            .map_err(|e| invalid(&e))?;
        }
        if let Some(r) = self.sweep.impurity_ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(ConfigError::Invalid(format!("impurity ratio {r} must lie in [0, 1)")));
        }
        Ok(())
    }
}

/// Recursively overwrites `base` with `user`, rejecting keys `base` lacks.
/// Leaf values replace wholesale; type errors surface on deserialization.
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(slot) = base.get_mut(&key) else {
            return Err(ConfigError::Parse(format!("unknown key `{path}`")));
        };
        match (slot, value) {
            (toml::Value::Table(inner), toml::Value::Table(over)) => merge(inner, over, &path)?,
            (toml::Value::Table(_), _) => return Err(ConfigError::Parse(format!("`{path}` must be a table"))),
            (slot, value) => *slot = value,
        }
    }
    Ok(())
}
