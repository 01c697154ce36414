//! The run configuration document and output provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::HmmConfig;
use crate::clusterer::SimilarityWeights;
use crate::embeddings::Node2VecConfig;
use crate::error::{Error, Result};
use crate::recovery::{ModelConfig, TrainConfig};
use crate::synthgen::{GridConfig, Scheme2Config, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    /// Simulator identities: the majority vehicle is the true one.
    GroundTruth,
    Scheme1,
    Scheme2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub normal_threshold: f64,
    pub high_threshold: f64,
    pub weights: SimilarityWeights,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            normal_threshold: 0.8,
            high_threshold: 0.9,
            weights: SimilarityWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub scheme: LabelScheme,
    pub noise_quantile: f64,
    pub scheme2: Scheme2Config,
    /// Fraction of labeled clusters held out for testing.
    pub test_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            scheme: LabelScheme::GroundTruth,
            noise_quantile: 0.2,
            scheme2: Scheme2Config::default(),
            test_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub camera_coverage: f64,
    pub sim: SimConfig,
    pub clustering: ClusteringConfig,
    pub labels: LabelConfig,
    pub node2vec: Node2VecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hmm: HmmConfig,
    /// Recoverer whose paths drive clustering feedback and speed maps.
    pub feedback_method: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridConfig::default(),
            camera_coverage: 0.4,
            sim: SimConfig::default(),
            clustering: ClusteringConfig::default(),
            labels: LabelConfig::default(),
            node2vec: Node2VecConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            hmm: HmmConfig::default(),
            feedback_method: "model".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.camera_coverage > 0.0 && self.camera_coverage <= 1.0) {
            return Err(Error::Config(format!("camera_coverage {} outside (0, 1]", self.camera_coverage)));
        }
        let c = &self.clustering;
        if !(0.0..=1.0).contains(&c.normal_threshold) || !(0.0..=1.0).contains(&c.high_threshold) {
            return Err(Error::Config("clustering thresholds must lie in [0, 1]".into()));
        }
        if c.high_threshold < c.normal_threshold {
            return Err(Error::Config("high_threshold must not be below normal_threshold".into()));
        }
        if !(0.0..1.0).contains(&self.labels.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        self.hmm.validate()?;
        crate::experiment::Method::parse(&self.feedback_method)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn meta(&self) -> Meta {
        Meta {
            config_hash: self.hash(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Provenance stamped into every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"d_modle": 3}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"camera_coverage": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"feedback_method": "magic"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"clustering": {"normal_threshold": 0.95}}"#).is_err());
    }
}
