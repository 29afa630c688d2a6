//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use faultclip_core::metrics::{XScale, DEFAULT_FAULT_RATES};
use faultclip_core::tuner::TuneScope;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Drives the synthetic dataset, the split and every fault mask.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub tune: TuneSection,
    /// Directory relative paths are resolved against: the config file's
    /// directory, or the working directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            out_dir: default_out_dir(),
            seed: 0,
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            sweep: SweepSection::default(),
            tune: TuneSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Class-conditional blobs shaped like the model input.
    Synthetic {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    /// CIFAR-10 binary batches, concatenated in the order given.
    Cifar10 { dir: PathBuf, files: Vec<String> },
}

fn default_samples() -> usize {
    2000
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            samples: default_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_calibration_fraction")]
    pub calibration_fraction: f64,
}

fn default_calibration_fraction() -> f64 {
    0.1
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            calibration_fraction: default_calibration_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_rates")]
    pub fault_rates: Vec<f64>,
    #[serde(default = "default_eval_trials")]
    pub trials: usize,
    /// `"network"`, or a conv/fc layer name or index.
    #[serde(default = "default_scope")]
    pub scope: String,
    #[serde(default = "yes")]
    pub include_biases: bool,
    #[serde(default)]
    pub x_scale: XScale,
}

fn default_rates() -> Vec<f64> {
    DEFAULT_FAULT_RATES.to_vec()
}

fn default_eval_trials() -> usize {
    50
}

fn default_scope() -> String {
    "network".into()
}

fn yes() -> bool {
    true
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fault_rates: default_rates(),
            trials: default_eval_trials(),
            scope: default_scope(),
            include_biases: true,
            x_scale: XScale::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_min_iters")]
    pub min_iters: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tune_trials")]
    pub trials: usize,
    /// Grid used inside the tuner; the sweep grid when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_rates: Option<Vec<f64>>,
    #[serde(default)]
    pub scope: TuneScope,
    /// Activation layer names or indices; input to output when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_order: Option<Vec<String>>,
}

fn default_max_iters() -> usize {
    10
}

fn default_min_iters() -> usize {
    3
}

fn default_delta() -> f64 {
    0.01
}

fn default_tune_trials() -> usize {
    10
}

impl Default for TuneSection {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            min_iters: default_min_iters(),
            delta: default_delta(),
            trials: default_tune_trials(),
            fault_rates: None,
            scope: TuneScope::default(),
            layer_order: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn model_path(&self) -> Result<PathBuf, CliError> {
        let path = self
            .model
            .as_deref()
            .ok_or_else(|| CliError::Config("no model given (set `model` or pass --model)".into()))?;
        let path = self.resolve(path);
        if !path.is_file() {
            return Err(CliError::Config(format!("model file not found: {}", path.display())));
        }
        Ok(path)
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(file)
    }

    /// SHA-256 over the canonical JSON form of everything except `out_dir`,
    /// which only says where results go.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config is plain data");
        v.as_object_mut().expect("struct").remove("out_dir");
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("value"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
