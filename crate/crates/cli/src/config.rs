use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flexcmh::data::SyntheticSpec;
use flexcmh::trainer::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

/// Where the modalities come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Dataset manifest; relative paths resolve against the config file.
    Manifest(PathBuf),
}

/// Pairing regime applied to the training split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Every known pair is used.
    #[default]
    Paired,
    /// A fraction of the pairs is kept; the rest lose their correspondence.
    WeakShuffled,
    /// As `WeakShuffled`, and a fraction of the last modality is removed.
    WeakDropped,
    /// No pairs at all.
    Unpaired,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Paired => "paired",
            Setting::WeakShuffled => "weak_shuffled",
            Setting::WeakDropped => "weak_dropped",
            Setting::Unpaired => "unpaired",
        }
    }
}

fn d_bits() -> Vec<usize> {
    vec![16]
}
fn d_top_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Query modality name; all modalities when absent.
    #[serde(default)]
    pub query: Option<String>,
    /// Database modality name; all other modalities when absent.
    #[serde(default)]
    pub database: Option<String>,
    #[serde(default = "d_bits")]
    pub bits: Vec<usize>,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    /// Also score seeded random codes.
    #[serde(default)]
    pub random_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            query: None,
            database: None,
            bits: d_bits(),
            top_k: d_top_k(),
            random_baseline: false,
        }
    }
}

fn d_output() -> PathBuf {
    PathBuf::from("out")
}
fn d_keep() -> f64 {
    0.5
}
fn d_drop() -> f64 {
    0.1
}
fn d_train_fraction() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "d_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub setting: Setting,
    /// Fraction of known pairs kept in the weak settings.
    #[serde(default = "d_keep")]
    pub keep_fraction: f64,
    /// Fraction of the last modality's training samples removed in
    /// `weak_dropped`.
    #[serde(default = "d_drop")]
    pub drop_fraction: f64,
    /// Train only on samples that have a kept pair.
    #[serde(default)]
    pub paired_only: bool,
    /// Feed the shuffled remainder to the trainer as (wrong) known pairs.
    #[serde(default)]
    pub trust_shuffled: bool,
    /// Share of pair-connected sample groups used for training.
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, train: TrainConfig) -> Self {
        Self {
            data,
            train,
            eval: EvalConfig::default(),
            output: d_output(),
            setting: Setting::default(),
            keep_fraction: d_keep(),
            drop_fraction: d_drop(),
            paired_only: false,
            trust_shuffled: false,
            train_fraction: d_train_fraction(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if self.eval.bits.is_empty() {
            bail!("eval.bits must list at least one code length");
        }
        if self.eval.bits.contains(&0) {
            bail!("code lengths must be >= 1");
        }
        if self.eval.top_k == 0 {
            bail!("eval.top_k must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            bail!("keep_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            bail!("drop_fraction must lie in [0, 1)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bail!("train_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Sets the training seed and, for synthetic data, the generator seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.train.mode = mode;
    }

    /// Trains at the first length and evaluates at all of them.
    pub fn set_bits(&mut self, bits: Vec<usize>) {
        if let Some(&b) = bits.first() {
            self.train.b = b;
            self.eval.bits = bits;
        }
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        match &self.data {
            DataSource::Manifest(p) if p.is_relative() => Some(self.base_dir.join(p)),
            DataSource::Manifest(p) => Some(p.clone()),
            DataSource::Synthetic(_) => None,
        }
    }
}
