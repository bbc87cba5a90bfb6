//! Experiment configuration files: strict TOML parsing, dotted `key=value`
//! overrides, validation and the fully resolved form written with each run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_mnist_dir, load_png_dir, DataError, InstanceNoise, SemiSupervisedDataset, Split};
use crate::eval::ClassifierConfig;
use crate::latent::LatentSpec;
use crate::nets::{ArchConfig, ImageShape};
use crate::trainer::{AnnealConfig, EvalSettings, LossConfig, OptimizerConfig, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Self::Invalid { key: key.to_owned(), reason: reason.into() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// IDX files (`train-images-idx3-ubyte` and friends) in `path`.
    #[default]
    Mnist,
    /// PNG files in `path` with a `file,label...` CSV per split.
    Png,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub kind: DatasetKind,
    pub path: PathBuf,
    /// Geometry; defaults to 1×28×28.
    #[serde(default = "mnist_shape")]
    pub shape: ImageShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Use only the first `limit` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

fn mnist_shape() -> ImageShape {
    ImageShape::MNIST
}

impl DatasetConfig {
    fn labels_file(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.train_labels.as_deref(),
            Split::Test => self.test_labels.as_deref(),
        }
    }

    /// Checks that every referenced path exists.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        if !self.path.is_dir() {
            return Err(ConfigError::invalid("dataset.path", format!("{} is not a directory", self.path.display())));
        }
        match self.kind {
            DatasetKind::Mnist => {
                for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
                {
                    if !self.path.join(name).is_file() {
                        return Err(ConfigError::invalid("dataset.path", format!("{} has no {name}", self.path.display())));
                    }
                }
            }
            DatasetKind::Png => {
                for (key, split) in [("dataset.train_labels", Split::Train), ("dataset.test_labels", Split::Test)] {
                    match self.labels_file(split) {
                        Some(p) if p.is_file() => {}
                        Some(p) => return Err(ConfigError::invalid(key, format!("{} does not exist", p.display()))),
                        None => return Err(ConfigError::invalid(key, "required for png datasets")),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(&self, split: Split) -> Result<SemiSupervisedDataset, DataError> {
        let data = match self.kind {
            DatasetKind::Mnist => load_mnist_dir(&self.path, split)?,
            DatasetKind::Png => {
                let labels = self.labels_file(split).expect("checked labels path");
                load_png_dir(&self.path, labels, self.shape, split)?
            }
        };
        Ok(match (split, self.limit) {
            (Split::Train, Some(n)) => data.truncate(n),
            _ => data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    pub fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { mode: TrainMode::SsInfogan, batch_size: 64, epochs: 30, steps_per_epoch: None, fraction: 1.0 }
    }
}

fn default_latent() -> LatentSpec {
    LatentSpec::mnist_default()
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Everything one experiment depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_latent")]
    pub latent: LatentSpec,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub anneal: AnnealConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub instance_noise: InstanceNoise,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub classifier: ClassifierConfig,
}

/// Splits `a.b.c=value` into its key path and TOML value. Values that do not
/// parse as TOML are taken as bare strings.
pub fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let (key, raw) = text.split_once('=').ok_or_else(|| ConfigError::Override(text.to_owned()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(text.to_owned()));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((key.split('.').map(str::to_owned).collect(), value))
}

/// Sets a dotted key in a TOML document, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = doc;
    for (i, part) in parents.iter().enumerate() {
        let entry = table.entry(part.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::invalid(&path[..=i].join("."), "is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a document after applying `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut doc, &path, value)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Semantic checks that do not touch the file system.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.fraction) {
            return Err(ConfigError::invalid("train.fraction", "must lie in [0, 1]"));
        }
        if t.fraction > 0.0 && t.mode == TrainMode::SsInfogan && !self.latent.has_supervised() {
            return Err(ConfigError::invalid("latent.codes", "train.fraction > 0 requires at least one supervised code"));
        }
        if self.dataset.shape != ImageShape::MNIST && self.dataset.kind == DatasetKind::Mnist {
            return Err(ConfigError::invalid("dataset.shape", "mnist datasets are 1x28x28"));
        }
        self.train_config().validate().map_err(|e| ConfigError::invalid("train", e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            latent: self.latent.clone(),
            arch: self.arch.clone(),
            shape: self.dataset.shape,
            mode: self.train.mode,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            steps_per_epoch: self.train.steps_per_epoch,
            seed: self.seed,
            fraction: self.train.fraction,
            anneal: self.anneal,
            loss: self.loss,
            optimizer: self.optimizer,
            noise: self.instance_noise,
            eval: self.eval.clone(),
        }
    }

    /// The resolved configuration, including every default.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable configuration")
    }
}
