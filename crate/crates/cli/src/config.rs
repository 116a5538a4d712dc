//! Experiment configuration, read from TOML.
//!
//! ```toml
//! output_dir = "runs/mnist"
//! strategies = ["max", "multipartite"]
//!
//! [dataset]
//! name = "mnist"            # mnist | cifar10 | synthetic
//! train_per_class = 1000
//! test_per_class = 200
//!
//! [architecture]
//! preset = "small"
//! init = "he"
//!
//! [training]
//! epochs = 5
//! seed = 1
//! ```
//!
//! Every key has a default; see the structs below.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rankpool::nn::{preset_small, Init, LayerSpec};
use rankpool::pooling::{PoolSpec, Strategy};
use rankpool::projection::FitConfig;
use rankpool::train::{Refresh, TrainConfig};
use serde::Deserialize;

use crate::CliError;

pub const DATA_DIR_ENV: &str = "RANKPOOL_DATA_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_strategies() -> Vec<String> {
    Strategy::ALL.iter().map(|s| s.name().to_string()).collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub name: String,
    /// Directory holding the dataset files; falls back to
    /// `$RANKPOOL_DATA_DIR/<name>`.
    pub path: Option<PathBuf>,
    /// Stratified subset sizes; 0 keeps every image.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Subtract the training set's per-pixel mean from both sets.
    pub mean_subtract: bool,
    /// Synthetic blobs only.
    pub train_size: usize,
    pub test_size: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: "mnist".into(),
            path: None,
            train_per_class: 0,
            test_per_class: 0,
            seed: 0,
            mean_subtract: false,
            train_size: 64,
            test_size: 32,
            height: 8,
            width: 8,
            classes: 2,
        }
    }
}

impl DatasetConfig {
    /// Dataset directory: explicit path, else `$RANKPOOL_DATA_DIR/<name>`.
    pub fn resolve_dir(&self) -> Result<PathBuf, CliError> {
        if let Some(p) = &self.path {
            return Ok(p.clone());
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(root) => Ok(Path::new(&root).join(&self.name)),
            None => Err(CliError::Dataset(format!(
                "no dataset.path given and {DATA_DIR_ENV} is not set"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum LayerConfig {
    Conv {
        kernel: [usize; 2],
        out_channels: usize,
    },
    Relu,
    /// Uses the strategy under comparison.
    Pool {
        size: usize,
    },
    Fc {
        out_units: usize,
    },
    SoftmaxLoss,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    /// `small` or `custom` (then `layers` is used).
    pub preset: String,
    pub layers: Vec<LayerConfig>,
    /// `he` or `gaussian`.
    pub init: String,
    pub init_std: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            preset: "small".into(),
            layers: Vec::new(),
            init: "gaussian".into(),
            init_std: 0.01,
        }
    }
}

impl ArchitectureConfig {
    pub fn layer_specs(
        &self,
        classes: usize,
        strategy: Strategy,
    ) -> Result<Vec<LayerSpec>, CliError> {
        match self.preset.as_str() {
            "small" => Ok(preset_small(classes, strategy)),
            "custom" => {
                if self.layers.is_empty() {
                    return Err(CliError::Config(
                        "custom architecture needs [[architecture.layers]]".into(),
                    ));
                }
                Ok(self
                    .layers
                    .iter()
                    .map(|l| match *l {
                        LayerConfig::Conv {
                            kernel,
                            out_channels,
                        } => LayerSpec::Conv {
                            kernel: (kernel[0], kernel[1]),
                            out_channels,
                        },
                        LayerConfig::Relu => LayerSpec::Relu,
                        LayerConfig::Pool { size } => {
                            LayerSpec::Pool(PoolSpec::square(size, strategy))
                        }
                        LayerConfig::Fc { out_units } => LayerSpec::Fc { out_units },
                        LayerConfig::SoftmaxLoss => LayerSpec::SoftmaxLoss,
                    })
                    .collect())
            }
            other => Err(CliError::Config(format!(
                "unknown architecture preset {other:?}"
            ))),
        }
    }

    pub fn init(&self) -> Result<Init, CliError> {
        match self.init.as_str() {
            "he" => Ok(Init::He),
            "gaussian" if self.init_std >= 0.0 && self.init_std.is_finite() => {
                Ok(Init::Gaussian(self.init_std))
            }
            "gaussian" => Err(CliError::Config(format!(
                "init_std must be non-negative, got {}",
                self.init_std
            ))),
            other => Err(CliError::Config(format!("unknown init {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_at: f64,
    pub seed: u64,
    /// `per-epoch`, `every-k-batches` or `once`.
    pub pool_refresh: String,
    pub refresh_batches: usize,
    pub score_sample_cap: usize,
    pub score_sample_images: usize,
    pub bins: usize,
    pub lambda_reg: f64,
    pub projection_lr: f64,
    pub projection_max_iters: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FitConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_drop_at: t.lr_drop_at,
            seed: t.seed,
            pool_refresh: "per-epoch".into(),
            refresh_batches: 100,
            score_sample_cap: t.score_sample_cap,
            score_sample_images: t.score_sample_images,
            bins: t.bins,
            lambda_reg: f.lambda_reg,
            projection_lr: f.learning_rate,
            projection_max_iters: f.max_iters,
        }
    }
}

impl TrainingConfig {
    pub fn to_train_config(&self) -> Result<TrainConfig, CliError> {
        let pool_refresh = match self.pool_refresh.as_str() {
            "per-epoch" => Refresh::PerEpoch,
            "once" => Refresh::Once,
            "every-k-batches" => Refresh::EveryKBatches(self.refresh_batches),
            other => return Err(CliError::Config(format!("unknown pool_refresh {other:?}"))),
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drop_at: self.lr_drop_at,
            seed: self.seed,
            pool_refresh,
            score_sample_cap: self.score_sample_cap,
            score_sample_images: self.score_sample_images,
            bins: self.bins,
            fit: FitConfig {
                lambda_reg: self.lambda_reg,
                learning_rate: self.projection_lr,
                max_iters: self.projection_max_iters,
                ..FitConfig::default()
            },
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>, CliError> {
        self.strategies
            .iter()
            .map(|s| Strategy::from_str(s).map_err(|e| CliError::Config(e.to_string())))
            .collect()
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.strategies.is_empty() {
            return Err(CliError::Config(
                "at least one pooling strategy is required".into(),
            ));
        }
        self.strategies()?;
        self.architecture.init()?;
        self.training.to_train_config()?;
        if !["mnist", "cifar10", "synthetic"].contains(&self.dataset.name.as_str()) {
            return Err(CliError::Config(format!(
                "unknown dataset {:?}",
                self.dataset.name
            )));
        }
        Ok(())
    }
}
