//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use liera_core::data::TaskSpec;
use liera_core::nn::ModelKind;
use liera_core::optim::{AdamWConfig, OptimizerConfig, SgdConfig};
use liera_core::peft::AdapterConfig;
use liera_core::train::TrainConfig;
use liera_core::DType;

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adamw,
    Sgd,
}

/// Optimizer section; unset fields take the defaults of `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_kind")]
    pub kind: OptimKind,
    pub lr: Option<f64>,
    pub betas: Option<[f64; 2]>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
}

fn default_kind() -> OptimKind {
    OptimKind::Adamw
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            kind: OptimKind::Adamw,
            lr: None,
            betas: None,
            eps: None,
            weight_decay: None,
            momentum: None,
            clip: None,
        }
    }
}

impl OptimSection {
    pub fn to_optimizer(&self) -> LabResult<OptimizerConfig> {
        let cfg = match self.kind {
            OptimKind::Adamw => {
                if self.momentum.is_some() {
                    return Err(LabError::config("momentum applies to sgd only"));
                }
                let d = AdamWConfig::default();
                let [beta1, beta2] = self.betas.unwrap_or([d.beta1, d.beta2]);
                OptimizerConfig::AdamW(AdamWConfig {
                    lr: self.lr.unwrap_or(d.lr),
                    beta1,
                    beta2,
                    eps: self.eps.unwrap_or(d.eps),
                    weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
                })
            }
            OptimKind::Sgd => {
                if self.betas.is_some() || self.eps.is_some() || self.weight_decay.is_some() {
                    return Err(LabError::config("betas, eps and weight_decay apply to adamw only"));
                }
                OptimizerConfig::Sgd(SgdConfig {
                    lr: self.lr.unwrap_or(0.01),
                    momentum: self.momentum.unwrap_or(0.0),
                })
            }
        };
        cfg.validate().map_err(|e| LabError::config(e.to_string()))?;
        Ok(cfg)
    }
}

fn default_model() -> ModelKind {
    ModelKind::SmallCnn
}
fn default_dtype() -> DType {
    DType::F64
}
fn default_n_train() -> usize {
    512
}
fn default_n_val() -> usize {
    256
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default = "default_model")]
    pub model: ModelKind,
    pub phase: Phase,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    #[serde(default)]
    pub optim: OptimSection,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    /// Directory written by `gen-data`; the task is generated in memory when
    /// absent.
    #[serde(default)]
    pub data_in: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_in: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_out: Option<PathBuf>,
    #[serde(default)]
    pub report_out: Option<PathBuf>,
    /// When false, `wall_ms` is written as 0 so reports are byte-reproducible.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> LabResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LabError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves every relative path against its directory.
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data_in, &mut self.checkpoint_in, &mut self.checkpoint_out, &mut self.report_out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> LabResult<()> {
        self.task.validate().map_err(|e| LabError::config(format!("task: {e}")))?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LabError::config("epochs and batch_size must be positive"));
        }
        if self.n_train < self.task.n_classes || self.n_val < self.task.n_classes {
            return Err(LabError::config("n_train and n_val must be at least n_classes"));
        }
        if let Some(a) = &self.adapter {
            a.validate().map_err(|e| LabError::config(format!("adapter: {e}")))?;
        }
        if self.phase == Phase::Finetune && self.adapter.is_none() {
            return Err(LabError::config("finetune needs an adapter section"));
        }
        if let Some(c) = self.optim.clip {
            if !(c > 0.0) {
                return Err(LabError::config("optim.clip must be positive"));
            }
        }
        self.optim.to_optimizer()?;
        Ok(())
    }

    pub fn train_config(&self, shuffle_seed: u64) -> LabResult<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optim.to_optimizer()?,
            clip: self.optim.clip,
            seed: shuffle_seed,
        })
    }

    pub fn adapter(&self) -> LabResult<&AdapterConfig> {
        self.adapter.as_ref().ok_or_else(|| LabError::config("missing adapter section"))
    }
}
