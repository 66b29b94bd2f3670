//! TOML run configuration with command-line overrides.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use dricl_core::model::Precision;
use dricl_core::objective::{DrIclConfig, TrainMode};
use dricl_core::trainer::{OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_pos: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { d_model: 64, layers: 2, heads: 2, max_pos: 2048 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DrIclSection {
    pub alpha: f64,
    pub gamma: f64,
    pub window: usize,
    pub samples: usize,
    pub reward_clip: f64,
    pub mode: String,
}

impl Default for DrIclSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 11.0,
            window: 10,
            samples: 1,
            reward_clip: 55.0,
            mode: "dricl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub precision: String,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 5,
            batch_size: 1,
            optimizer: "adam".into(),
            learning_rate: 3e-4,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 0,
            precision: "f64".into(),
            shuffle: true,
        }
    }
}

/// The full run configuration; every section has defaults, a TOML file
/// replaces them, and explicit command-line flags win over both.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub dricl: DrIclSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply_train_overrides(
        &mut self,
        mode: &Option<String>,
        alpha: Option<f64>,
        gamma: Option<f64>,
        window: Option<usize>,
        samples: Option<usize>,
        iterations: Option<usize>,
        lr: Option<f64>,
        batch: Option<usize>,
        seed: Option<u64>,
    ) -> Result<(), String> {
        if let Some(mode) = mode {
            mode.parse::<TrainMode>().map_err(|e| e.to_string())?;
            self.dricl.mode = mode.clone();
        }
        if let Some(v) = alpha {
            self.dricl.alpha = v;
        }
        if let Some(v) = gamma {
            self.dricl.gamma = v;
        }
        if let Some(v) = window {
            self.dricl.window = v;
        }
        if let Some(v) = samples {
            self.dricl.samples = v;
        }
        if let Some(v) = iterations {
            self.train.iterations = v;
        }
        if let Some(v) = lr {
            self.train.learning_rate = v;
        }
        if let Some(v) = batch {
            self.train.batch_size = v;
        }
        if let Some(v) = seed {
            self.train.seed = v;
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> Result<TrainConfig, String> {
        let mode: TrainMode = self.dricl.mode.parse().map_err(|e| format!("{e}"))?;
        let kind = match self.train.optimizer.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            other => return Err(format!("unknown optimizer: {other} (expected adam|sgd)")),
        };
        let precision = match self.train.precision.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(format!("unknown precision: {other} (expected f64|f32)")),
        };
        let cfg = TrainConfig {
            dricl: DrIclConfig {
                alpha: self.dricl.alpha,
                gamma: self.dricl.gamma,
                window_size: self.dricl.window,
                sample_size: self.dricl.samples,
                reward_clip: self.dricl.reward_clip,
                mode,
            },
            optimizer: OptimizerConfig {
                kind,
                learning_rate: self.train.learning_rate,
                weight_decay: self.train.weight_decay,
                ..OptimizerConfig::default()
            },
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            precision,
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
            shuffle: self.train.shuffle,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}
