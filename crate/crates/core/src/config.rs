//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_bytes;
use crate::metrics::default_thresholds;
use crate::network::ModelConfig;
use crate::train::{LossConfig, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            input_dir: None,
            output_dir: None,
            thresholds: default_thresholds(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_slice(&read_bytes(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.normalized()?;
        self.optim.validate()?;
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "thresholds must be non-empty and strictly ascending".into(),
            ));
        }
        for dir in self.input_dir.iter() {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "input_dir {} is not a directory",
                    dir.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"model": {"embed_dim": 32, "decay_mode": "per_token"}}"#)
                .unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.patch_size, 4);
        assert_eq!(cfg.optim.seed, 42);
        assert_eq!(cfg.thresholds.len(), 99);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.patch_size = 3;
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            input_dir: Some("/nonexistent".into()),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
