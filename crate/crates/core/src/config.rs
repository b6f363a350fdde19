//! The experiment configuration document: one TOML file with `data`,
//! `model`, `train`, `eval`, and `report` sections. Parsing is strict
//! (unknown keys are rejected) and every field has a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DataConfig, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: Split::Test }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub out_dir: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { out_dir: "runs".to_string() }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate(self.model.k)?;
        if self.data.k != self.model.k {
            return Err(Error::Config(format!(
                "data.k = {} does not match model.k = {}",
                self.data.k, self.model.k
            )));
        }
        if self.data.rig.image_width % 2 != 0 || self.data.rig.image_height % 2 != 0 {
            return Err(Error::Config(
                "image width and height must be even (the extractor pools once)".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialized form, independent of source
    /// formatting and comments.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_document_gives_all_defaults() {
        let cfg = ExperimentConfig::from_str("").unwrap();
        assert_eq!(cfg.data.scenes, 4);
        assert_eq!(cfg.data.frames_per_scene, 50);
        assert_eq!(cfg.model.base_channels, 32);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = ExperimentConfig::from_str("[train]\nlearning_rate_typo = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate_typo"), "message should name the key: {msg}");
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::from_str("[train]\nepochs = 12\n").unwrap();
        let b = ExperimentConfig::from_str("\n# comment\n[train]\n  epochs   =   12\n").unwrap();
        let c = ExperimentConfig::from_str("[train]\nepochs = 13\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn cross_section_mismatches_are_caught() {
        let err = ExperimentConfig::from_str("[data]\nk = 4\n").unwrap_err();
        assert!(err.to_string().contains("does not match model.k"));
    }
}
