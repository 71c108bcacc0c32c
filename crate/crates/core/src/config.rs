//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::model::LenetVariant;
use crate::optim::OptimizerKind;
use crate::pruning::ControllerConfig;
use crate::regularizer::{RegConfig, RegMode};

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "eta",
    "optimizer",
    "lower_bound",
    "lambda",
    "pruning_percentage",
    "eval_interval",
    "mode",
    "decay_gamma",
    "plateau_patience",
    "finetune_epochs",
    "seed",
    "val_size",
    "data_dir",
    "variant",
    "output_dir",
    "init_checkpoint",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Maximum epochs of the prune phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f32,
    pub optimizer: OptimizerKind,
    /// Validation accuracy gate in percent.
    pub lower_bound: f64,
    pub lambda: f32,
    pub pruning_percentage: f64,
    pub eval_interval: u64,
    pub mode: RegMode,
    pub decay_gamma: f32,
    pub plateau_patience: u32,
    pub finetune_epochs: usize,
    /// Seeds weight initialization, the validation split and batch order.
    pub seed: u64,
    pub val_size: usize,
    pub data_dir: PathBuf,
    pub variant: LenetVariant,
    pub output_dir: PathBuf,
    /// Start from these weights instead of a fresh initialization.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 100,
            eta: 1e-3,
            optimizer: OptimizerKind::Adam,
            lower_bound: 98.7,
            lambda: 1e-3,
            pruning_percentage: 0.04,
            eval_interval: 250,
            mode: RegMode::Relevance,
            decay_gamma: 0.98,
            plateau_patience: 20,
            finetune_epochs: 5,
            seed: 0,
            val_size: 5000,
            data_dir: PathBuf::from("data/mnist"),
            variant: LenetVariant::Caffe431k,
            output_dir: PathBuf::from("runs/latest"),
            init_checkpoint: None,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        line,
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    /// Blank lines and lines starting with `#` are ignored.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })?;
            if seen.contains(known) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            match key {
                "epochs" => cfg.epochs = parse_value(line, key, value)?,
                "batch_size" => cfg.batch_size = parse_value(line, key, value)?,
                "eta" => cfg.eta = parse_value(line, key, value)?,
                "optimizer" => cfg.optimizer = parse_value(line, key, value)?,
                "lower_bound" => cfg.lower_bound = parse_value(line, key, value)?,
                "lambda" => cfg.lambda = parse_value(line, key, value)?,
                "pruning_percentage" => cfg.pruning_percentage = parse_value(line, key, value)?,
                "eval_interval" => cfg.eval_interval = parse_value(line, key, value)?,
                "mode" => cfg.mode = parse_value(line, key, value)?,
                "decay_gamma" => cfg.decay_gamma = parse_value(line, key, value)?,
                "plateau_patience" => cfg.plateau_patience = parse_value(line, key, value)?,
                "finetune_epochs" => cfg.finetune_epochs = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "val_size" => cfg.val_size = parse_value(line, key, value)?,
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "variant" => cfg.variant = parse_value(line, key, value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "init_checkpoint" => cfg.init_checkpoint = Some(PathBuf::from(value)),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        text.parse()
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig {
            mode: self.mode,
            lambda0: self.lambda,
            decay_gamma: self.decay_gamma,
            eta: self.eta,
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            eval_interval: self.eval_interval,
            lower_bound: self.lower_bound,
            pruning_percentage: self.pruning_percentage,
            plateau_patience: self.plateau_patience,
            finetune_epochs: self.finetune_epochs,
            max_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        self.reg_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.controller_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

impl fmt::Display for RunConfig {
    /// Writes every key, in a form that parses back to the same config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "eta = {}", self.eta)?;
        writeln!(f, "optimizer = {}", self.optimizer)?;
        writeln!(f, "lower_bound = {}", self.lower_bound)?;
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "pruning_percentage = {}", self.pruning_percentage)?;
        writeln!(f, "eval_interval = {}", self.eval_interval)?;
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "decay_gamma = {}", self.decay_gamma)?;
        writeln!(f, "plateau_patience = {}", self.plateau_patience)?;
        writeln!(f, "finetune_epochs = {}", self.finetune_epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "val_size = {}", self.val_size)?;
        writeln!(f, "data_dir = {}", self.data_dir.display())?;
        writeln!(f, "variant = {}", self.variant.as_str())?;
        writeln!(f, "output_dir = {}", self.output_dir.display())?;
        if let Some(p) = &self.init_checkpoint {
            writeln!(f, "init_checkpoint = {}", p.display())?;
        }
        Ok(())
    }
}
