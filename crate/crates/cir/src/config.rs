//! The JSON run configuration consumed by the pipeline subcommands.
//!
//! The schema is validated up front and unknown keys are rejected. A stable
//! fingerprint of the parsed document is embedded in every output artifact;
//! evaluation refuses checkpoints whose fingerprint differs from the
//! supplied config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::TpeSettings;
use crate::model::ModelConfig;
use crate::rng::content_hash;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Schema {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub features: PathBuf,
    pub triplets: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ir_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    /// External word-embedding table (TSV `word<TAB>v1,...,ve`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Spell-correction override map (TSV `misspelled<TAB>replacement`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextprepConfig {
    pub min_freq: u64,
    pub spell_correct: bool,
}

impl Default for TextprepConfig {
    fn default() -> Self {
        TextprepConfig { min_freq: 1, spell_correct: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub k_small: usize,
    pub k_large: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { k_small: 10, k_large: 50 }
    }
}

impl MetricsConfig {
    pub fn ks(&self) -> (usize, usize) {
        (self.k_small, self.k_large)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub n_trials: usize,
    pub rounds: usize,
    /// Early-stop threshold on the round-over-round objective gain, in
    /// recall points.
    pub stop_eps: f64,
    /// Per-row z-score normalization for externally supplied matrices.
    pub zscore: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let tpe = TpeSettings::default();
        EnsembleConfig {
            gamma: tpe.gamma,
            n_startup: tpe.n_startup,
            n_candidates: tpe.n_candidates,
            n_trials: 200,
            rounds: 3,
            stop_eps: 0.05,
            zscore: false,
        }
    }
}

impl EnsembleConfig {
    pub fn tpe_settings(&self) -> TpeSettings {
        TpeSettings {
            gamma: self.gamma,
            n_startup: self.n_startup,
            n_candidates: self.n_candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    #[serde(default)]
    pub textprep: TextprepConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| ConfigError::Schema { path: path.display().to_string(), source: e })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.metrics.k_small == 0 || self.metrics.k_small >= self.metrics.k_large {
            return Err(ConfigError::Invalid(
                "metrics.k_small must be positive and below k_large".into(),
            ));
        }
        let e = &self.ensemble;
        if !(e.gamma > 0.0 && e.gamma < 1.0) {
            return Err(ConfigError::Invalid("ensemble.gamma must be in (0, 1)".into()));
        }
        if e.n_trials == 0 || e.rounds == 0 || e.n_candidates == 0 {
            return Err(ConfigError::Invalid(
                "ensemble.n_trials, rounds and n_candidates must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable fingerprint of the parsed config (whitespace-insensitive).
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serialization");
        content_hash(canonical.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "seed": 7,
            "data": { "features": "f.tsv", "triplets": "t.jsonl" }
        }"#
        .to_string()
    }

    fn write_tmp(name: &str, content: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("cir-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let path = write_tmp("min.json", &minimal_json());
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.lr, 0.00011148);
        assert_eq!(cfg.train.beta1, 0.47);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.epochs, 80);
        assert_eq!(cfg.metrics.ks(), (10, 50));
        assert_eq!(cfg.ensemble.n_trials, 200);
        assert!(cfg.textprep.spell_correct);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let path = write_tmp(
            "unknown.json",
            r#"{ "seed": 1, "data": { "features": "f", "triplets": "t" }, "surprise": 1 }"#,
        );
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Schema { .. })));
        let path = write_tmp(
            "unknown2.json",
            r#"{ "seed": 1, "data": { "features": "f", "triplets": "t" },
                 "train": { "lr": 0.1, "warmup": 5 } }"#,
        );
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Schema { .. })));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let path = write_tmp(
            "bad.json",
            r#"{ "seed": 1, "data": { "features": "f", "triplets": "t" },
                 "train": { "lr": -1.0 } }"#,
        );
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = write_tmp("a.json", &minimal_json());
        let b = write_tmp("b.json", &minimal_json().replace('\n', " "));
        let ca = RunConfig::load(&a).unwrap();
        let cb = RunConfig::load(&b).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        let c = write_tmp("c.json", &minimal_json().replace("\"seed\": 7", "\"seed\": 8"));
        let cc = RunConfig::load(&c).unwrap();
        assert_ne!(ca.hash(), cc.hash());
    }
}
