use std::path::Path;

use predilect::ablation::EvalConfig;
use predilect::engine::TrainConfig;
use predilect::verifier::NoiseSweepConfig;
use predilect::world::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// The single JSON document every config-driven command reads. Missing
/// sections and keys take their defaults; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub verify: NoiseSweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::input(format!("config {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(r#"{"world": {"num_classes": 3}, "train": {"epochs": 2}, "verify": {"trials": 7}}"#).unwrap();
        assert_eq!(cfg.world.num_classes, 3);
        assert_eq!(cfg.world.d, WorldConfig::default().d);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.verify.trials, 7);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::parse(r#"{"train": {"lr": 0.1}}"#).unwrap_err().to_string();
        assert!(err.contains("`lr`"), "{err}");
        let err = RunConfig::parse(r#"{"plots": {}}"#).unwrap_err().to_string();
        assert!(err.contains("`plots`"), "{err}");
    }
}
