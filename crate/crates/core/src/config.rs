//! Run configuration: one TOML document with a section per component.
//! Every key is optional; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::synth::SceneConfig;
use crate::tracker::{GapDistribution, Optimizer, TrackConfig, TrainConfig};

/// Settings for the synthetic benchmark behind `oracle-table` and `topk`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Training sequences use seeds `seed + 1 ..= seed + train_sequences`.
    pub train_sequences: usize,
    pub center_thresholds: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_sequences: 8,
            center_thresholds: vec![10.0, 20.0],
            iou_thresholds: vec![0.5],
            train: TrainConfig {
                epochs: 10,
                lr: 1e-3,
                optimizer: Optimizer::AdamW,
                batch_size: 8,
                proj_lr_scale: 0.01,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub heatmap: HeatmapConfig,
    pub loss: LossConfig,
    pub scene: SceneConfig,
    pub gaps: GapDistribution,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub track: TrackConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            heatmap: HeatmapConfig::default(),
            loss: LossConfig::default(),
            scene: SceneConfig::default(),
            gaps: GapDistribution::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            track: TrackConfig::default(),
            benchmark: BenchmarkConfig::default(),
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
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.heatmap.validate()?;
        self.loss.validate()?;
        self.scene.validate()?;
        self.gaps.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.benchmark.train.validate()?;
        if self.benchmark.train_sequences == 0 {
            return Err(Error::Config("benchmark: train_sequences must be positive".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a serializable value's canonical TOML form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}
