use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sparsemax_fusion::sim::QualityProfile;
use sparsemax_fusion::Variant;

use crate::Failure;

pub const SEED_ENV: &str = "ADHOC_SEED";

/// Settings shared by `simulate`, `train` and `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub channels_train: usize,
    pub channels_test: usize,
    pub variant: Variant,
    #[serde(deserialize_with = "profile_from_json")]
    pub quality_profile: QualityProfile,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub pretrain_samples: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            channels_train: 16,
            channels_test: 30,
            variant: Variant::ScalingSparsemax,
            quality_profile: QualityProfile::HalfNoise,
            steps: 3000,
            learning_rate: 0.003,
            batch_size: 16,
            train_samples: 2000,
            test_samples: 200,
            pretrain_samples: 2000,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Accepts either a profile name (`"half-noise"`) or the full object form.
fn profile_from_json<'de, D: Deserializer<'de>>(d: D) -> Result<QualityProfile, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Form {
        Name(String),
        Full(QualityProfile),
    }
    match Form::deserialize(d)? {
        Form::Name(name) => name.parse().map_err(serde::de::Error::custom),
        Form::Full(p) => Ok(p),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        let positive = [
            ("channels_train", self.channels_train),
            ("channels_test", self.channels_test),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("train_samples", self.train_samples),
            ("test_samples", self.test_samples),
            ("pretrain_samples", self.pretrain_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Failure::Usage(format!("config: {name} must be >= 1")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Failure::Usage(format!(
                "config: learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Reads `path` (or the defaults), then applies `ADHOC_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sed": 2}"#).unwrap_err();
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "variant": "softmax"}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.variant, Variant::Softmax);
        assert_eq!(cfg.channels_train, 16);
    }

    #[test]
    fn profile_forms() {
        let a: RunConfig = serde_json::from_str(r#"{"quality_profile": "all-clean"}"#).unwrap();
        assert_eq!(a.quality_profile, QualityProfile::AllClean { floor_db: 10.0 });
        let b: RunConfig = serde_json::from_str(r#"{"quality_profile": {"all-clean": {"floor_db": 5.0}}}"#).unwrap();
        assert_eq!(b.quality_profile, QualityProfile::AllClean { floor_db: 5.0 });
        assert!(serde_json::from_str::<RunConfig>(r#"{"quality_profile": "loud"}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(cfg.to_value()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = RunConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Failure::Usage(_))));
    }
}
