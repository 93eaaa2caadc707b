//! Run configuration: one TOML file covering model, data, training and
//! experiment settings. Round-trips losslessly and is echoed into every run
//! summary for auditability.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{LeError, Result};
use crate::experiments::FusionKind;
use crate::model::{LossKind, ModelConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Plateau decay factor applied to the learning rate.
    pub lr_factor: f64,
    /// Epochs without validation improvement before decaying.
    pub patience: usize,
    pub min_delta: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_factor: 0.5,
            patience: 5,
            min_delta: 1e-4,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Earliest heads excluded from fusion and uncertainty metrics.
    pub skip: usize,
    pub fusion: FusionKind,
    /// Layer-agreement threshold for prediction depth.
    pub pd_threshold: f64,
    /// DSC below this counts as a poor segmentation in QC curves.
    pub poor_threshold: f64,
    pub corruption_mean: f64,
    pub corruption_std: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            skip: 1,
            fusion: FusionKind::Staple,
            pd_threshold: 0.90,
            poor_threshold: 0.90,
            corruption_mean: 0.3,
            corruption_std: 0.7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Laptop-scale defaults: 64x64 single-class ellipses, depth-3 backbone
    /// with five heads.
    pub fn desk_default() -> Self {
        Self {
            seed: 17,
            out_dir: "runs/default".to_string(),
            model: ModelConfig {
                depth: 3,
                base_channels: 8,
                num_classes: 1,
                height: 64,
                width: 64,
                first_block_downsamples: false,
                loss: LossKind::GeneralizedDice,
                ce_class_weights: None,
            },
            data: DatasetSpec {
                train: 500,
                val: 50,
                test: 50,
                height: 64,
                width: 64,
                num_classes: 1,
                contrast_range: [0.4, 0.8],
                noise_level: 0.08,
                low_contrast_fraction: 0.3,
                seed: 17,
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.height != self.data.height || self.model.width != self.data.width {
            return Err(LeError::InvalidConfig(format!(
                "model expects {}x{} inputs but the dataset produces {}x{}",
                self.model.height, self.model.width, self.data.height, self.data.width
            )));
        }
        let expected_channels = if self.data.num_classes == 1 {
            1
        } else {
            self.data.num_classes + 1
        };
        if self.model.num_classes != expected_channels {
            return Err(LeError::InvalidConfig(format!(
                "model.num_classes must be {expected_channels} for a {}-class dataset, got {}",
                self.data.num_classes, self.model.num_classes
            )));
        }
        let n = self.model.num_heads();
        if self.eval.skip + 2 > n {
            return Err(LeError::InvalidConfig(format!(
                "eval.skip {} leaves fewer than two of {n} heads",
                self.eval.skip
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(LeError::InvalidConfig(
                "train.epochs and train.batch_size must be positive".into(),
            ));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(LeError::InvalidConfig("train.learning_rate must be positive".into()));
        }
        if !(0.0 < self.train.lr_factor && self.train.lr_factor < 1.0) {
            return Err(LeError::InvalidConfig("train.lr_factor must lie in (0, 1)".into()));
        }
        if self.train.patience == 0 {
            return Err(LeError::InvalidConfig("train.patience must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.pd_threshold)
            || !(0.0..=1.0).contains(&self.eval.poor_threshold)
        {
            return Err(LeError::InvalidConfig(
                "eval thresholds must lie in [0, 1]".into(),
            ));
        }
        if self.eval.corruption_std < 0.0 {
            return Err(LeError::InvalidConfig("eval.corruption_std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| LeError::InvalidConfig(format!("serializing config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| LeError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            LeError::InvalidConfig(format!("reading config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        RunConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let config = RunConfig::desk_default();
        let text = config.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
        assert_eq!(text, back.to_toml().unwrap());
    }

    #[test]
    fn unknown_field_is_rejected_with_its_name() {
        let mut text = RunConfig::desk_default().to_toml().unwrap();
        text.push_str("\n[train2]\nepochs = 3\n");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("train2"), "diagnostic must name the field: {err}");
    }

    #[test]
    fn mismatched_model_and_data_sizes_are_rejected() {
        let mut config = RunConfig::desk_default();
        config.data.height = 32;
        config.data.width = 32;
        assert!(config.validate().is_err());
    }

    #[test]
    fn skip_beyond_head_budget_is_rejected() {
        let mut config = RunConfig::desk_default();
        config.eval.skip = config.model.num_heads() - 1;
        assert!(config.validate().is_err());
    }

    #[test]
    fn multiclass_channel_consistency_is_enforced() {
        let mut config = RunConfig::desk_default();
        config.data.num_classes = 3;
        assert!(config.validate().is_err());
        config.model.num_classes = 4;
        config.validate().unwrap();
    }
}
