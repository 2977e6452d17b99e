//! Experiment configuration: JSON with strict keys, unknown fields rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UlabError};
use crate::lm::model::ModelConfig;
use crate::lm::tokenizer::BYTE_VOCAB;
use crate::memo::OutlierBounds;
use crate::unlearn::{GaOptions, SgaConfig, TaConfig, TauConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub context: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab: BYTE_VOCAB,
            layers: 2,
            heads: 4,
            dim: 64,
            context: 128,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            context: self.context,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Lines taken into the training pool; the rest form the unseen pool.
    pub train_lines: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 300,
            lr: 1e-3,
            batch: 8,
            train_lines: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub neighbours: usize,
    pub mask_frac: f32,
    /// Unseen sequences drawn as nonmembers per replica.
    pub nonmembers: usize,
    pub bin_width: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            neighbours: 8,
            mask_frac: 0.2,
            nonmembers: 8,
            bin_width: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpdSection {
    pub lambda: f32,
}

impl Default for DpdSection {
    fn default() -> Self {
        DpdSection { lambda: 0.2 }
    }
}

/// One entry in the algorithm list: `{"ga": {...}}`, `{"sga": {}}`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmConfig {
    Ga(GaOptions),
    Sga(SgaConfig),
    Ta(TaConfig),
    Tau(TauConfig),
    Dpd(DpdSection),
}

impl AlgorithmConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Ga(_) => "ga",
            AlgorithmConfig::Sga(_) => "sga",
            AlgorithmConfig::Ta(_) => "ta",
            AlgorithmConfig::Tau(_) => "tau",
            AlgorithmConfig::Dpd(_) => "dpd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: String,
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Unseen sequences used for the empirical threshold (and utility).
    #[serde(default = "default_unseen_pool")]
    pub unseen_pool: usize,
    #[serde(default = "default_forget_sizes")]
    pub forget_sizes: Vec<usize>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub algorithms: Vec<AlgorithmConfig>,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub bounds: OutlierBounds,
}

fn default_unseen_pool() -> usize {
    256
}

fn default_forget_sizes() -> Vec<usize> {
    vec![16]
}

fn default_replicas() -> usize {
    5
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| UlabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| UlabError::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.to_model_config(self.seed).validate()?;
        if self.replicas == 0 {
            return Err(UlabError::config("replicas must be at least 1"));
        }
        if self.forget_sizes.is_empty() {
            return Err(UlabError::config("forget_sizes must not be empty"));
        }
        for &size in &self.forget_sizes {
            if size == 0 {
                return Err(UlabError::config("forget-set sizes must be positive"));
            }
            if size > self.train.train_lines {
                return Err(UlabError::config(format!(
                    "forget-set size {size} exceeds the training pool of {}",
                    self.train.train_lines
                )));
            }
        }
        if self.unseen_pool == 0 {
            return Err(UlabError::config("unseen_pool must be positive"));
        }
        if self.attack.nonmembers == 0 || self.attack.nonmembers > self.unseen_pool {
            return Err(UlabError::config(format!(
                "attack.nonmembers {} must be in [1, unseen_pool = {}]",
                self.attack.nonmembers, self.unseen_pool
            )));
        }
        if self.attack.neighbours == 0 {
            return Err(UlabError::config("attack.neighbours must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.attack.mask_frac) {
            return Err(UlabError::config("attack.mask_frac must be in [0, 1]"));
        }
        if self.attack.bin_width <= 0.0 {
            return Err(UlabError::config("attack.bin_width must be positive"));
        }
        OutlierBounds::new(self.bounds.lb, self.bounds.ub)
            .map_err(|e| UlabError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "corpus": "corpus.txt",
        "output_dir": "out",
        "algorithms": [ {"ga": {}}, {"sga": {"gamma": 0.8}}, {"dpd": {}} ]
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.replicas, 5);
        assert_eq!(cfg.forget_sizes, vec![16]);
        assert_eq!(cfg.unseen_pool, 256);
        assert_eq!(cfg.attack.neighbours, 8);
        assert_eq!(cfg.algorithms.len(), 3);
        assert_eq!(cfg.algorithms[0].name(), "ga");
        match &cfg.algorithms[1] {
            AlgorithmConfig::Sga(s) => assert_eq!(s.gamma, 0.8),
            other => panic!("wrong variant {other:?}"),
        }
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let bad = r#"{"corpus": "c", "output_dir": "o", "algorithms": [], "typo_key": 1}"#;
        assert!(matches!(
            ExperimentConfig::from_json(bad),
            Err(UlabError::Config(_))
        ));
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        let bad = r#"{
            "corpus": "c", "output_dir": "o",
            "algorithms": [ {"ga": {"learning_rate_typo": 0.1}} ]
        }"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn unknown_algorithm_is_rejected() {
        let bad = r#"{"corpus": "c", "output_dir": "o", "algorithms": [ {"sgd": {}} ]}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn oversized_forget_set_rejected() {
        let bad = r#"{
            "corpus": "c", "output_dir": "o", "algorithms": [],
            "train": {"train_lines": 8},
            "forget_sizes": [16]
        }"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(back, cfg);
    }
}
