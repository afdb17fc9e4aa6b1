//! Run configuration: dataset, model, losses, optimizer and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::eval::{tau_grid, Connectivity};
use crate::losses::LossWeights;
use crate::model::{LearningRates, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Cross-entropy only.
    Vanilla,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_former: f64,
    pub lr_latter: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient L2 norm cap applied before each step; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_former: 0.01,
            lr_latter: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 1.0,
        }
    }
}

/// Cross-entropy-only phase run before the main schedule in both modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 8, lr: 0.1 }
    }
}

impl OptimizerConfig {
    pub fn rates(&self) -> LearningRates {
        LearningRates {
            former: self.lr_former,
            latter: self.lr_latter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tau_grid_size: usize,
    pub deltas: Vec<f64>,
    pub connectivity: Connectivity,
    /// Binarization threshold for Top-k / GT Loc.
    pub loc_tau: f64,
    /// IoU threshold for Top-k / GT Loc.
    pub loc_delta: f64,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau_grid_size: 101,
            deltas: vec![0.3, 0.5, 0.7],
            connectivity: Connectivity::Eight,
            loc_tau: 0.2,
            loc_delta: 0.5,
            histogram_bins: 20,
        }
    }
}

impl EvalConfig {
    pub fn grid(&self) -> Vec<f64> {
        tau_grid(self.tau_grid_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub pretrain: PretrainConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            data: DatasetSpec::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            pretrain: PretrainConfig::default(),
            epochs: 60,
            batch_size: 16,
            seed: 0,
            mode: Mode::Full,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loss weights actually used: vanilla mode zeroes every auxiliary term.
    pub fn effective_loss(&self) -> LossWeights {
        match self.mode {
            Mode::Full => self.loss.clone(),
            Mode::Vanilla => LossWeights {
                lambda_sim: 0.0,
                lambda_norm: 0.0,
                lambda_drop: 0.0,
                ..self.loss.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!("{} does not match data.num_classes {}", self.model.num_classes, self.data.num_classes),
            ));
        }
        if self.model.input_size != self.data.image_size {
            return Err(Error::config("model.input_size", "must equal data.image_size"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr_former >= 0.0 && o.lr_latter >= 0.0 && (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0 && o.grad_clip >= 0.0) {
            return Err(Error::config("optimizer", "rates, decay and clip must be non-negative, momentum in [0, 1)"));
        }
        if !(self.pretrain.lr >= 0.0 && self.pretrain.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be finite and non-negative"));
        }
        let e = &self.eval;
        if e.tau_grid_size < 2 {
            return Err(Error::config("eval.tau_grid_size", "need at least 2 thresholds"));
        }
        if e.deltas.is_empty() || e.deltas.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(Error::config("eval.deltas", "need IoU thresholds in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&e.loc_tau) || !(0.0..=1.0).contains(&e.loc_delta) {
            return Err(Error::config("eval.loc_tau", "thresholds must lie in [0, 1]"));
        }
        if e.histogram_bins == 0 {
            return Err(Error::config("eval.histogram_bins", "must be positive"));
        }
        Ok(())
    }
}
