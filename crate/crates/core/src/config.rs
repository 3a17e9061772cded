//! Experiment configuration files.
//!
//! A config is a TOML document with a `format_version` and the sections
//! `dataset`, `split`, `model`, `train`, and optionally `generate`, `output`
//! and `sweep`. Unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cards::{CardRanges, CARD_PIXELS};
use crate::sequences::{DEFAULT_ALPHABET_SIZE, DEFAULT_LENGTH};
use crate::split::RangeSplit;
use crate::trainer::{GenerateConfig, TrainConfig};
use crate::vae::VaeArchitecture;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported config format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Cards {
        count: usize,
        seed: u64,
        #[serde(default = "default_angle")]
        angle: [f64; 2],
        #[serde(default = "default_shear")]
        shear: [f64; 2],
        #[serde(default = "default_translation")]
        translation: [f64; 2],
    },
    SequencesSynthetic {
        count: usize,
        seed: u64,
        #[serde(default = "default_length")]
        length: usize,
        #[serde(default = "default_alphabet_size")]
        alphabet_size: usize,
        #[serde(default = "default_target_range")]
        target_range: [f64; 2],
    },
    SequencesCsv {
        /// Relative paths resolve against the config file's directory.
        path: String,
        #[serde(default = "default_length")]
        length: usize,
        /// Alphabet size after padding; `None` keeps only corpus tokens.
        #[serde(default = "default_alphabet_size_opt")]
        alphabet_size: Option<usize>,
        #[serde(default = "default_true")]
        strict: bool,
    },
}

fn default_angle() -> [f64; 2] {
    CardRanges::default().angle
}
fn default_shear() -> [f64; 2] {
    CardRanges::default().shear
}
fn default_translation() -> [f64; 2] {
    CardRanges::default().translation
}
fn default_length() -> usize {
    DEFAULT_LENGTH
}
fn default_alphabet_size() -> usize {
    DEFAULT_ALPHABET_SIZE
}
fn default_alphabet_size_opt() -> Option<usize> {
    Some(DEFAULT_ALPHABET_SIZE)
}
fn default_target_range() -> [f64; 2] {
    [-500.0, -200.0]
}
fn default_true() -> bool {
    true
}

impl DatasetConfig {
    pub fn card_ranges(&self) -> Option<CardRanges> {
        match self {
            DatasetConfig::Cards {
                angle,
                shear,
                translation,
                ..
            } => Some(CardRanges {
                angle: *angle,
                shear: *shear,
                translation: *translation,
            }),
            _ => None,
        }
    }

    pub fn is_cards(&self) -> bool {
        matches!(self, DatasetConfig::Cards { .. })
    }

    /// Width of one datum row, when it is known without reading data.
    pub fn data_dim(&self) -> Option<usize> {
        match self {
            DatasetConfig::Cards { .. } => Some(CARD_PIXELS),
            DatasetConfig::SequencesSynthetic {
                length,
                alphabet_size,
                ..
            } => Some(length * alphabet_size),
            DatasetConfig::SequencesCsv {
                length,
                alphabet_size,
                ..
            } => alphabet_size.map(|a| length * a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl ModelConfig {
    pub fn architecture(&self, data_dim: usize) -> VaeArchitecture {
        VaeArchitecture {
            data_dim,
            hidden: self.hidden.clone(),
            latent_dim: self.latent_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Default output directory when `--out` is not given.
    #[serde(default)]
    pub dir: Option<String>,
    /// Write a checkpoint after every evaluation, not only at the end.
    #[serde(default)]
    pub checkpoint_every_eval: bool,
    /// Fill the `seconds` column of the history. Off by default so reruns
    /// produce byte-identical files; timings always go to `timing.csv`.
    #[serde(default)]
    pub record_wall_time: bool,
}

/// One swept key: a dotted path into the config and the values to try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axes: Vec<SweepAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub split: RangeSplit,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(value)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let found = table
            .get("format_version")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| ConfigError::Invalid("missing integer format_version".into()))?;
        if found != CONFIG_FORMAT_VERSION as i64 {
            return Err(ConfigError::Version {
                found: found.clamp(0, u32::MAX as i64) as u32,
                expected: CONFIG_FORMAT_VERSION,
            });
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DatasetConfig::SequencesCsv { path: p, .. } = &mut cfg.dataset {
            let rel = Path::new(p.as_str());
            if rel.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(rel).display().to_string();
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match &self.dataset {
            DatasetConfig::Cards { count, .. } => {
                if *count == 0 {
                    return bad("dataset.count must be at least 1".into());
                }
                let ranges = self.dataset.card_ranges().expect("cards");
                ranges.validate().or_else(|m| bad(format!("dataset: {m}")))?;
                if ranges.angle[0] < -30.0 || ranges.angle[1] > 30.0 {
                    return bad("dataset.angle must lie within [-30, 30]".into());
                }
                self.split
                    .validate_within(-30.0, 30.0)
                    .or_else(|e| bad(format!("split: {e}")))?;
            }
            DatasetConfig::SequencesSynthetic {
                count,
                length,
                alphabet_size,
                target_range,
                ..
            } => {
                if *count == 0 {
                    return bad("dataset.count must be at least 1".into());
                }
                if *length < 3 {
                    return bad("dataset.length must be at least 3".into());
                }
                if !(2..=27).contains(alphabet_size) {
                    return bad("dataset.alphabet_size must be in 2..=27".into());
                }
                if !(target_range[0] < target_range[1]) {
                    return bad("dataset.target_range must be increasing".into());
                }
                self.split.validate().or_else(|e| bad(format!("split: {e}")))?;
            }
            DatasetConfig::SequencesCsv {
                length,
                alphabet_size,
                ..
            } => {
                if *length == 0 {
                    return bad("dataset.length must be at least 1".into());
                }
                if *alphabet_size == Some(0) {
                    return bad("dataset.alphabet_size must be at least 1".into());
                }
                self.split.validate().or_else(|e| bad(format!("split: {e}")))?;
            }
        }
        if self.model.latent_dim == 0 || self.model.hidden.contains(&0) {
            return bad("model dims must be positive".into());
        }
        self.train.validate().or_else(|e| bad(e.to_string()))?;
        if self.generate.restarts == 0 || !(self.generate.step_size > 0.0) {
            return bad("generate.restarts and generate.step_size must be positive".into());
        }
        if let Some(s) = &self.sweep {
            for axis in &s.axes {
                if axis.values.is_empty() {
                    return bad(format!("sweep axis '{}' has no values", axis.key));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the settings that determine a training trajectory. The
    /// epoch budget, evaluation cadence and output settings are excluded so a
    /// run can be resumed with a larger budget.
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.name = None;
        c.train.epochs = 1;
        c.train.eval_every = 1;
        c.output = OutputConfig::default();
        c.generate = GenerateConfig::default();
        c.sweep = None;
        let digest = Sha256::digest(c.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `--seed`: replaces the training seed, and the dataset seed for
    /// generated datasets.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        match &mut self.dataset {
            DatasetConfig::Cards { seed: s, .. } | DatasetConfig::SequencesSynthetic { seed: s, .. } => {
                *s = seed;
            }
            DatasetConfig::SequencesCsv { .. } => {}
        }
    }

    /// One config per point of the sweep grid (cartesian product of axes,
    /// first axis slowest), with a label naming the overrides.
    pub fn expand_sweep(&self) -> Result<Vec<(String, ExperimentConfig)>, ConfigError> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![("base".to_string(), self.clone())]);
        };
        let mut base = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        base.remove("sweep");
        let mut points: Vec<(Vec<String>, toml::Table)> = vec![(Vec::new(), base)];
        for axis in &sweep.axes {
            let mut next = Vec::new();
            for (labels, table) in &points {
                for v in &axis.values {
                    let mut t = table.clone();
                    set_path(&mut t, &axis.key, v.clone())?;
                    let mut l = labels.clone();
                    l.push(format!("{}={}", axis.key, v));
                    next.push((l, t));
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|(labels, t)| Ok((labels.join(","), Self::from_table(t)?)))
            .collect()
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, prefix) = parts
        .split_last()
        .ok_or_else(|| ConfigError::Invalid("empty sweep key".into()))?;
    let mut cur = table;
    for p in prefix {
        cur = cur
            .get_mut(*p)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| ConfigError::Invalid(format!("sweep key '{key}': no section '{p}'")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
