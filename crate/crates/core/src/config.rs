//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "model": { "image_size": 32, "patch_size": 4, "channels": 3, "d": 64,
//!              "depth": 6, "heads": 4, "classes": 10 },
//!   "alore": { "n": 4, "r": 4, "sites": ["PreMHSA", "PreFFN"] },
//!   "train": { "lr": 0.001, "epochs": 30, "warmup_epochs": 3 },
//!   "data":  { "classes": 10, "image_size": 32, "channels": 3 },
//!   "regime": "Alore",
//!   "seed": 0
//! }
//! ```
//!
//! Every section and field except `model` is optional; unknown keys are rejected.
//! Parse errors carry the JSON path of the offending field.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::alore::{AloreConfig, Site};
use crate::backbone::{Regime, ViTConfig};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::linalg::Precision;
use crate::train::TrainConfig;

/// Adapter settings; width comes from the model and dropout from `train.dropout_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AloreSection {
    pub n: usize,
    pub r: usize,
    pub sites: Vec<Site>,
    /// Defaults to every layer.
    pub layers_adapted: Option<usize>,
}

impl Default for AloreSection {
    fn default() -> Self {
        Self {
            n: 4,
            r: 4,
            sites: vec![Site::PreMhsa, Site::PreFfn],
            layers_adapted: None,
        }
    }
}

/// Which half of a transfer pair to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSide {
    #[default]
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    #[serde(default)]
    pub alore: AloreSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: TaskSpec,
    #[serde(default)]
    pub task: TaskSide,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
    /// Arithmetic precision; defaults to 64-bit.
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Checkpoint to start the backbone from; its head is replaced to fit `data.classes`.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

fn default_precision() -> Precision {
    Precision::F64
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at {path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn alore_config(&self) -> AloreConfig {
        AloreConfig {
            d: self.model.d,
            n: self.alore.n,
            r: self.alore.r,
            sites: self.alore.sites.clone(),
            layers_adapted: self.alore.layers_adapted.unwrap_or(self.model.depth),
            dropout_p: self.train.dropout_p,
        }
    }

    /// Training settings with the experiment's regime and seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            regime: self.regime,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.alore_config().validate(self.model.depth)?;
        self.train_config().validate()?;
        self.data.validate()?;
        if self.data.classes != self.model.classes {
            return Err(Error::Config(format!(
                "data.classes = {} but model.classes = {}",
                self.data.classes, self.model.classes
            )));
        }
        if self.data.image_size != self.model.image_size || self.data.channels != self.model.channels {
            return Err(Error::Config("data image shape does not match the model".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"image_size": 8, "patch_size": 4, "channels": 3, "d": 16,
                  "depth": 2, "heads": 2, "classes": 10},
        "data": {"image_size": 8}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.model.mlp_ratio, 4);
        let a = cfg.alore_config();
        assert_eq!((a.n, a.r, a.layers_adapted), (4, 4, 2));
        assert_eq!(a.sites, vec![Site::PreMhsa, Site::PreFfn]);
        assert_eq!(cfg.regime, Regime::Alore);
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.train.batch_size, 32);
    }

    #[test]
    fn unknown_key_reports_path() {
        let text = MINIMAL.replace("\"depth\": 2", "\"depth\": 2, \"bogus\": 1");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("model"), "{err}");
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn wrong_type_reports_path() {
        let text = MINIMAL.replace("\"data\": {", "\"train\": {\"lr\": \"fast\"}, \"data\": {");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");
    }

    #[test]
    fn regime_and_seed_flow_into_training() {
        let text = MINIMAL.replace("\"data\": {", "\"regime\": \"LinearProbe\", \"seed\": 9, \"data\": {");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        let t = cfg.train_config();
        assert_eq!((t.regime, t.seed), (Regime::LinearProbe, 9));
    }

    #[test]
    fn semantic_errors() {
        let bad_n = MINIMAL.replace("\"data\": {", "\"alore\": {\"n\": 3}, \"data\": {");
        assert!(ExperimentConfig::from_json(&bad_n).is_err());
        let bad_classes = MINIMAL.replace("\"data\": {", "\"data\": {\"classes\": 3, ");
        assert!(ExperimentConfig::from_json(&bad_classes).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        back.train.seed = cfg.train.seed;
        assert_eq!(back, cfg);
    }
}
