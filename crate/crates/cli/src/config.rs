use std::fs;
use std::path::Path;

use awe_core::corpus::Split;
use awe_core::features::FeatureConfig;
use awe_core::model::ModelConfig;
use awe_core::synthgen::SynthConfig;
use awe_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: Split::Test, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradConfig {
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradConfig {
    fn default() -> Self {
        GradConfig { eps: 1e-4, samples: 64, seed: 0 }
    }
}

/// Every section of a run, as read from one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub check_grad: GradConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<(Self, bool), CliError> {
        let Some(path) = path else {
            return Ok((RunConfig::default(), false));
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let raw: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let has_model = raw.contains_key("model");
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Ok((cfg, has_model))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.features.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        if self.eval.batch_size == 0 {
            return Err(CliError::Usage("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("serializing config: {e}")))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, text).map_err(|e| CliError::Core(awe_core::Error::Io { path, source: e }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nepochs = 3\nloss_mode = \"contrastive\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.model.hidden, 512);
        assert!(toml::from_str::<RunConfig>("[train]\nepoch = 3\n").is_err());
    }
}
