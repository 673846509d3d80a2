use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::data::{self, Binarization, SyntheticSpec, TabularDataset};
use crate::lens1::BaselineKind;
use crate::lens2::DEFAULT_CAP;
use crate::train::{AdamConfig, Method, TrainConfig, UnlearnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    pub label_column: String,
    #[serde(default)]
    pub binarization: Binarization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
}

impl DatasetConfig {
    pub fn synthetic(name: &str, spec: SyntheticSpec) -> Self {
        Self {
            name: name.to_string(),
            source: DatasetSource::Synthetic(spec),
        }
    }

    /// Loads or generates the raw (unstandardised) dataset.
    pub fn load(&self, base_dir: &Path) -> Result<TabularDataset, PipelineError> {
        let mut ds = match &self.source {
            DatasetSource::Synthetic(spec) => data::make_synthetic(&self.name, spec)?,
            DatasetSource::Csv(c) => {
                let path = if c.path.is_relative() {
                    base_dir.join(&c.path)
                } else {
                    c.path.clone()
                };
                data::load_csv(&path, &c.label_column, &c.binarization)?
            }
        };
        ds.name = self.name.clone();
        ds.validate_for_protocol()?;
        Ok(ds)
    }
}

/// Unlearning hyperparameters shared by every method of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSettings {
    pub lr: f64,
    /// Per-method epoch overrides.
    pub epochs: BTreeMap<Method, usize>,
    pub alpha: f64,
    pub temperature: f64,
    /// Defaults to the run's unlearn seed.
    pub teacher_seed: Option<u64>,
    pub adam: AdamConfig,
}

impl Default for UnlearnSettings {
    fn default() -> Self {
        let base = UnlearnConfig::new(Method::FineTune);
        Self {
            lr: base.lr,
            epochs: BTreeMap::new(),
            alpha: base.alpha,
            temperature: base.temperature,
            teacher_seed: None,
            adam: AdamConfig::default(),
        }
    }
}

impl UnlearnSettings {
    pub fn for_method(&self, method: Method, unlearn_seed: u64) -> UnlearnConfig {
        UnlearnConfig {
            method,
            lr: self.lr,
            epochs: self.epochs.get(&method).copied(),
            alpha: self.alpha,
            temperature: self.temperature,
            unlearn_seed,
            teacher_seed: self.teacher_seed.unwrap_or(unlearn_seed),
            adam: self.adam.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Oracle seeds; every unordered pair is compared.
    pub seeds: Vec<u64>,
    /// Dataset to calibrate on; the first configured dataset when absent.
    pub dataset: Option<String>,
    /// Forget fraction; the first configured one when absent.
    pub ff: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            dataset: None,
            ff: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LrU,
    ForgetSeed,
    BaselineKind,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lr_u" | "lr" => Ok(Self::LrU),
            "forget_seed" => Ok(Self::ForgetSeed),
            "baseline_kind" | "baseline" => Ok(Self::BaselineKind),
            _ => Err(format!("unknown sweep axis '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lr_values: Vec<f64>,
    /// Learning rate at which each method's base epoch count applies.
    /// Epochs at `lr` become `max(1, round(base * reference_lr / lr))`.
    pub reference_lr: f64,
    pub forget_seeds: Vec<u64>,
    pub baselines: Vec<BaselineKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lr_values: vec![1e-4, 5e-4, 1e-3],
            reference_lr: 5e-4,
            forget_seeds: (999..1004).collect(),
            baselines: vec![BaselineKind::Median, BaselineKind::Mean],
        }
    }
}

/// Scaled epoch count for a learning-rate sweep point.
pub fn scaled_epochs(base: usize, reference_lr: f64, lr: f64) -> usize {
    ((base as f64 * reference_lr / lr).round() as usize).max(1)
}

fn default_train_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_unlearn_seed() -> u64 {
    100
}
fn default_methods() -> Vec<Method> {
    vec![
        Method::GradientAscent,
        Method::NegGradPlus,
        Method::FineTune,
        Method::Scrub,
    ]
}
fn default_ffs() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}
fn default_partition_seed() -> u64 {
    999
}
fn default_test_frac() -> f64 {
    0.2
}
fn default_cap() -> usize {
    DEFAULT_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub datasets: Vec<DatasetConfig>,
    #[serde(default = "default_train_seeds")]
    pub train_seeds: Vec<u64>,
    #[serde(default = "default_unlearn_seed")]
    pub unlearn_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_ffs")]
    pub forget_fractions: Vec<f64>,
    #[serde(default = "default_partition_seed")]
    pub split_seed: u64,
    #[serde(default = "default_partition_seed")]
    pub forget_seed: u64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub unlearn: UnlearnSettings,
    #[serde(default)]
    pub baseline: BaselineKind,
    #[serde(default = "default_cap")]
    pub m4_cap: usize,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Directory relative CSV paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(datasets: Vec<DatasetConfig>) -> Self {
        Self {
            datasets,
            train_seeds: default_train_seeds(),
            unlearn_seed: default_unlearn_seed(),
            methods: default_methods(),
            forget_fractions: default_ffs(),
            split_seed: default_partition_seed(),
            forget_seed: default_partition_seed(),
            test_frac: default_test_frac(),
            train: TrainConfig::default(),
            unlearn: UnlearnSettings::default(),
            baseline: BaselineKind::default(),
            m4_cap: default_cap(),
            calibration: CalibrationConfig::default(),
            sweep: SweepConfig::default(),
            base_dir: PathBuf::new(),
        }
    }

    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        for s in &mut self.train_seeds {
            *s = s.wrapping_add(offset);
        }
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.datasets.is_empty() {
            return bad("no datasets".into());
        }
        let names: BTreeSet<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        if names.len() != self.datasets.len() {
            return bad("dataset names must be unique".into());
        }
        if self.train_seeds.is_empty() {
            return bad("no train seeds".into());
        }
        if self.train_seeds.iter().collect::<BTreeSet<_>>().len() != self.train_seeds.len() {
            return bad("train seeds must be unique".into());
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return bad("methods must be unique".into());
        }
        if self.forget_fractions.is_empty() {
            return bad("no forget fractions".into());
        }
        for &ff in &self.forget_fractions {
            if !(ff > 0.0 && ff < 1.0) {
                return bad(format!("forget fraction {ff} outside (0, 1)"));
            }
        }
        if !(self.test_frac > 0.0 && self.test_frac < 1.0) {
            return bad(format!("test_frac {} outside (0, 1)", self.test_frac));
        }
        if !(self.train.lr > 0.0 && self.unlearn.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.unlearn.alpha) || self.unlearn.temperature <= 0.0 {
            return bad("alpha must lie in [0, 1] and temperature be positive".into());
        }
        if self.m4_cap < 2 {
            return bad("m4_cap must be at least 2".into());
        }
        Ok(())
    }
}
