//! Experiment configuration, read from and written to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Task, ALPHABET, IMAGE_CLASSES, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::trainer::{LrSchedule, TrainConfig, WeightDecayMode};

pub const DEFAULT_RATES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_SCHEME: &str = "r-weighted-3";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Examples (spirals, tinyimages) or characters (charlm).
    pub size: usize,
    /// Window length for the character corpus.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    16
}

/// Architecture, either from a builder or spelled out layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        groups: usize,
    },
    Cnn {
        stages: Vec<Vec<usize>>,
        groups: usize,
    },
    CharLm {
        embed: usize,
        #[serde(default = "one")]
        embed_groups: usize,
        hidden: usize,
        groups: usize,
        #[serde(default)]
        dropout: f64,
    },
    Custom {
        spec: ModelSpec,
    },
}

fn one() -> usize {
    1
}

impl ModelConfig {
    /// Concrete layer list for `task`'s input and class count.
    pub fn build(&self, task: Task) -> Result<ModelSpec> {
        let spec = match (self, task) {
            (ModelConfig::Custom { spec }, _) => spec.clone(),
            (ModelConfig::Mlp { hidden, groups }, Task::Spirals) => {
                ModelSpec::mlp(2, hidden, 2, *groups)
            }
            (ModelConfig::Mlp { hidden, groups }, Task::TinyImages) => {
                let mut spec =
                    ModelSpec::mlp(IMAGE_SIDE * IMAGE_SIDE, hidden, IMAGE_CLASSES, *groups);
                spec.input = crate::model::InputSpec::Image {
                    channels: 1,
                    height: IMAGE_SIDE,
                    width: IMAGE_SIDE,
                };
                spec.layers.insert(0, crate::model::LayerSpec::Flatten);
                spec
            }
            (ModelConfig::Cnn { stages, groups }, Task::TinyImages) => {
                ModelSpec::cnn(1, IMAGE_SIDE, IMAGE_SIDE, stages, IMAGE_CLASSES, *groups)
            }
            (
                ModelConfig::CharLm {
                    embed,
                    embed_groups,
                    hidden,
                    groups,
                    dropout,
                },
                Task::CharLm,
            ) => ModelSpec::char_lm(
                ALPHABET.len(),
                *embed,
                *embed_groups,
                *hidden,
                *groups,
                *dropout,
            ),
            (arch, task) => {
                return Err(Error::Config(format!(
                    "architecture {} does not fit task {task}",
                    arch.name()
                )))
            }
        };
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Mlp { .. } => "mlp",
            ModelConfig::Cnn { .. } => "cnn",
            ModelConfig::CharLm { .. } => "char_lm",
            ModelConfig::Custom { .. } => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Seeds data generation, initialization, shuffling, scheduling and
    /// dropout; replaces any seed in `[train]`.
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Desk-scale defaults for each task.
    pub fn preset(task: Task) -> Self {
        let train = |epochs, batch_size, lr: f64, momentum| TrainConfig {
            epochs,
            batch_size,
            lr: LrSchedule {
                initial: lr,
                milestones: vec![0.5, 0.75],
                factor: 0.1,
            },
            momentum,
            weight_decay: 1e-4,
            decay_mode: WeightDecayMode::All,
            seed: 0,
            scheme: DEFAULT_SCHEME.into(),
            rates: DEFAULT_RATES.to_vec(),
            loss_weights: None,
            average_over_rates: false,
        };
        let (data, model, train) = match task {
            Task::Spirals => (
                DataConfig {
                    size: 1000,
                    steps: default_steps(),
                },
                ModelConfig::Mlp {
                    hidden: vec![64, 64],
                    groups: 8,
                },
                train(60, 32, 0.02, 0.9),
            ),
            Task::TinyImages => (
                DataConfig {
                    size: 512,
                    steps: default_steps(),
                },
                ModelConfig::Cnn {
                    stages: vec![vec![16], vec![32]],
                    groups: 8,
                },
                train(15, 32, 0.05, 0.9),
            ),
            Task::CharLm => (
                DataConfig {
                    size: 4096,
                    steps: 16,
                },
                ModelConfig::CharLm {
                    embed: 16,
                    embed_groups: 1,
                    hidden: 64,
                    groups: 8,
                    dropout: 0.0,
                },
                train(10, 16, 0.5, 0.9),
            ),
        };
        Self {
            task,
            seed: 7,
            out_dir: PathBuf::from("runs").join(task.to_string()),
            data,
            model,
            train,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Checks everything that can be checked before any training starts.
    pub fn validate(&self) -> Result<()> {
        if self.data.size == 0 {
            return Err(Error::Config("data size must be positive".into()));
        }
        if self.task == Task::CharLm && self.data.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        let train = self.train_config();
        train.validate()?;
        train.scheduling_scheme()?;
        let spec = self.model.build(self.task)?;
        spec.validate(&train.rates)?;
        Ok(())
    }
}
