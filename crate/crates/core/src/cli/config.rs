//! Run configuration, read from TOML. Unknown keys are rejected and every
//! schedule default is the published one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{parse_layers, LayerSpec};
use crate::optim::OptimKind;
use crate::quantize::{LevelFamily, LevelSet};
use crate::rpr::SchedulePlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub rpr: RprSection,
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    SynthBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// IDX directory for `mnist`.
    pub dir: PathBuf,
    /// Examples held out from the end of the training split for validation.
    pub val_size: usize,
    /// Training examples drawn per epoch; 0 uses the whole training split.
    pub epoch_samples: usize,
    pub batch_size: usize,
    pub pad: usize,
    pub flip_prob: f64,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Mnist,
            dir: PathBuf::from("data/mnist"),
            val_size: 5000,
            epoch_samples: 0,
            batch_size: 64,
            pad: 2,
            flip_prob: 0.0,
            classes: 3,
            per_class: 100,
            test_per_class: 50,
            dim: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: [
                "conv2d(1,8,3,1,1)",
                "batchnorm2d(8)",
                "relu",
                "maxpool2d(2)",
                "conv2d(8,16,3,1,1)",
                "batchnorm2d(16)",
                "relu",
                "maxpool2d(2)",
                "flatten",
                "linear(784,64)",
                "batchnorm2d(64)",
                "relu",
                "linear(64,10)",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        parse_layers(&self.layers).map_err(|e| Error::Config(format!("model.layers: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub epochs: u32,
    pub lr: f64,
    pub optimizer: OptimizerName,
    pub momentum: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 20,
            lr: 1e-3,
            optimizer: OptimizerName::Adam,
            momentum: 0.9,
        }
    }
}

pub fn optim_kind(name: OptimizerName, momentum: f64) -> OptimKind {
    match name {
        OptimizerName::Adam => OptimKind::adam(),
        OptimizerName::Sgd => OptimKind::sgd(momentum),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Checkpoint,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelsConfig {
    pub family: String,
    /// Inclusive exponent range `[lo, hi]` for `sym_exponential`.
    pub exponents: Option<[i32; 2]>,
    /// Explicit values for `custom`.
    pub values: Option<Vec<f64>>,
}

impl Default for LevelsConfig {
    fn default() -> Self {
        LevelsConfig {
            family: "ternary".into(),
            exponents: None,
            values: None,
        }
    }
}

impl LevelsConfig {
    pub fn build(&self) -> Result<LevelSet> {
        let family: LevelFamily = self.family.parse()?;
        let wrap = |e: Error| Error::Config(format!("levels: {e}"));
        match family {
            LevelFamily::Custom => {
                let values = self
                    .values
                    .as_ref()
                    .ok_or_else(|| Error::Config("levels.values is required for `custom`".into()))?;
                LevelSet::custom(values).map_err(wrap)
            }
            _ => LevelSet::make(family, self.exponents.map(|[lo, hi]| lo..=hi)).map_err(wrap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RprSection {
    pub init: InitMode,
    pub checkpoint: Option<PathBuf>,
    pub levels: LevelsConfig,
    pub rescale: bool,
    pub optimizer: OptimizerName,
    pub momentum: f64,
    pub lr: f64,
    pub initial_ff: f64,
    pub ff_ladder: Vec<f64>,
    pub epochs_per_rung: u32,
    pub lr_drop_after: u32,
    pub final_epochs_per_lr: u32,
    pub final_lr_divisors: Vec<f64>,
    pub patience: u32,
    pub min_delta: f64,
    pub max_initial_epochs: u32,
}

impl Default for RprSection {
    fn default() -> Self {
        let plan = SchedulePlan::default();
        RprSection {
            init: InitMode::Checkpoint,
            checkpoint: None,
            levels: LevelsConfig::default(),
            rescale: true,
            optimizer: OptimizerName::Adam,
            momentum: 0.9,
            lr: plan.base_lr,
            initial_ff: plan.initial_ff,
            ff_ladder: plan.ladder,
            epochs_per_rung: plan.epochs_per_rung,
            lr_drop_after: plan.lr_drop_after,
            final_epochs_per_lr: plan.final_epochs_per_lr,
            final_lr_divisors: plan.final_lr_divisors,
            patience: plan.patience,
            min_delta: plan.min_delta,
            max_initial_epochs: plan.max_initial_epochs,
        }
    }
}

impl RprSection {
    pub fn plan(&self) -> Result<SchedulePlan> {
        let plan = SchedulePlan {
            initial_ff: self.initial_ff,
            ladder: self.ff_ladder.clone(),
            epochs_per_rung: self.epochs_per_rung,
            lr_drop_after: self.lr_drop_after,
            final_epochs_per_lr: self.final_epochs_per_lr,
            final_lr_divisors: self.final_lr_divisors.clone(),
            patience: self.patience,
            min_delta: self.min_delta,
            max_initial_epochs: self.max_initial_epochs,
            base_lr: self.lr,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// `y = X·w* + noise·ε` with Gaussian `w*`.
    Random,
    /// `y = X·(scale·q₀)` for a random assignment `q₀`.
    Realizable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub problem: ProblemKind,
    pub rows: usize,
    pub dim: usize,
    pub noise: f64,
    pub scale: f64,
    pub batch_size: usize,
    pub pretrain_epochs: u32,
    pub pretrain_lr: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            problem: ProblemKind::Random,
            rows: 32,
            dim: 6,
            noise: 0.1,
            scale: 0.7,
            batch_size: 4,
            pretrain_epochs: 100,
            pretrain_lr: 0.01,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.specs()?;
        self.rpr.plan()?;
        self.rpr.levels.build()?;
        if self.data.batch_size == 0 || self.oracle.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.flip_prob) {
            return Err(Error::Config("data.flip_prob must lie in [0, 1]".into()));
        }
        if self.data.source == DataSource::SynthBlobs && self.data.classes < 2 {
            return Err(Error::Config("data.classes must be at least 2".into()));
        }
        for lr in [self.baseline.lr, self.oracle.pretrain_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}
