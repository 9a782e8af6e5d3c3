use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dims, ModelSpec};
use crate::numerics::ScalarKind;
use crate::par::Parallelism;
use crate::relation::SrtVariant;
use crate::retrieval::{FusionConfig, LossConfig};

/// Training hyperparameters. Loaded from flat `key = value` TOML; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub margin: f64,
    pub layers: usize,
    pub heads: usize,
    pub joint_dim: usize,
    pub global_dim: usize,
    /// Hidden width of the transformer MLPs; 0 means `4 × joint_dim`.
    pub mlp_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub seed: u64,
    pub variant: SrtVariant,
    pub frame_positional: bool,
    pub proposal_positional: bool,
    pub scalar_kind: ScalarKind,
    pub hardest_negative: bool,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            margin: 0.2,
            layers: 2,
            heads: 4,
            joint_dim: 64,
            global_dim: 64,
            mlp_dim: 0,
            learning_rate: 2e-4,
            batch_size: 8,
            epochs: 500,
            max_steps: 0,
            seed: 0,
            variant: SrtVariant::FullSRT,
            frame_positional: true,
            proposal_positional: false,
            scalar_kind: ScalarKind::Training32,
            hardest_negative: false,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        FusionConfig::new(self.lambda)?;
        LossConfig::new(self.margin, self.hardest_negative)?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 so every pair has a negative, got {}",
                self.batch_size
            )));
        }
        if self.global_dim != self.joint_dim {
            return Err(Error::Config(format!(
                "global_dim ({}) must equal joint_dim ({})",
                self.global_dim, self.joint_dim
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        self.model_spec(Dims::default()).block()?;
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig::new(self.lambda).expect("validated")
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig::new(self.margin, self.hardest_negative).expect("validated")
    }

    pub fn parallelism(&self) -> Parallelism {
        Parallelism::from_flag(self.parallel)
    }

    pub fn mlp_hidden(&self) -> usize {
        if self.mlp_dim == 0 {
            4 * self.joint_dim
        } else {
            self.mlp_dim
        }
    }

    pub fn model_spec(&self, dims: Dims) -> ModelSpec {
        ModelSpec {
            dims,
            joint_dim: self.joint_dim,
            heads: self.heads,
            mlp_dim: self.mlp_hidden(),
            layers: self.layers,
            frame_positional: self.frame_positional,
            proposal_positional: self.proposal_positional,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = TrainConfig::from_toml("lambda = 0.5\ndropout = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("dropout"), "{err}");
    }

    #[test]
    fn range_checks() {
        assert!(TrainConfig::from_toml("lambda = 1.5").is_err());
        assert!(TrainConfig::from_toml("margin = 0.0").is_err());
        assert!(TrainConfig::from_toml("margin = 1.0").is_ok());
        assert!(TrainConfig::from_toml("batch_size = 1").is_err());
        assert!(TrainConfig::from_toml("heads = 5").is_err());
        assert!(TrainConfig::from_toml("variant = \"SpatialSRT\"\nscalar_kind = \"Verification64\"").is_ok());
        assert!(TrainConfig::from_toml("variant = \"Spatial\"").is_err());
    }
}
