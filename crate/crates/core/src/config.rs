//! Experiment configuration: a flat TOML document whose keys mirror the CLI flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fedproto::{TrainConfig, TransportKind, Variant};
use crate::orthomap::BlockSpec;
use crate::sgd::OptimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the initial shared classifier comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClassifierInit {
    /// Seeded Gaussian rows, each scaled to unit norm.
    Random,
    /// An FCLS file (rows are unit-normalised on load).
    File(PathBuf),
}

impl FromStr for ClassifierInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "random" {
            return Ok(ClassifierInit::Random);
        }
        match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => Ok(ClassifierInit::File(PathBuf::from(p))),
            _ => Err(format!("unknown classifier init '{s}' (expected random or file:PATH)")),
        }
    }
}

impl TryFrom<String> for ClassifierInit {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ClassifierInit> for String {
    fn from(c: ClassifierInit) -> String {
        c.to_string()
    }
}

impl fmt::Display for ClassifierInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierInit::Random => f.write_str("random"),
            ClassifierInit::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Softmax temperature τ; fixed, not learned.
    pub tau: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    pub rounds: u32,
    pub batch_size: usize,
    /// Number of diagonal blocks of the local transform; must divide the dimension.
    pub blocks: usize,
    pub variant: Variant,
    pub init: ClassifierInit,
    pub transport: TransportKind,
    pub manifest: PathBuf,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tau: 100.0,
            seed: 0,
            learning_rate: 5e-5,
            momentum: 5e-4,
            weight_decay: 5e-4,
            epochs: 1,
            rounds: 200,
            batch_size: 32,
            blocks: 1,
            variant: Variant::Orthogonal,
            init: ClassifierInit::Random,
            transport: TransportKind::InProcess,
            manifest: PathBuf::from("manifest.json"),
            out: PathBuf::from("runs/latest"),
        }
    }
}

impl ExperimentConfig {
    /// Defaults tuned for the synthetic benchmark: `lr = 1e-3`, `T = 100`.
    pub fn synthetic() -> Self {
        Self {
            learning_rate: 1e-3,
            rounds: 100,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return invalid("tau must be positive and finite");
        }
        if self.optim().validate().is_err() {
            return invalid("learning_rate, momentum and weight_decay must be finite and non-negative");
        }
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if self.rounds == 0 {
            return invalid("rounds must be at least 1");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if self.blocks == 0 {
            return invalid("blocks must be at least 1");
        }
        Ok(())
    }

    /// Full validation against the feature dimension; returns the block layout.
    pub fn validate_for_dim(&self, dim: usize) -> Result<BlockSpec, ConfigError> {
        self.validate()?;
        BlockSpec::new(dim, self.blocks)
            .map_err(|_| ConfigError::Invalid(format!("blocks = {} does not divide dimension {dim}", self.blocks)))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            tau: self.tau,
            optim: self.optim(),
            epochs: self.epochs,
            rounds: self.rounds,
            batch_size: self.batch_size,
            blocks: self.blocks,
            variant: self.variant,
        }
    }
}
