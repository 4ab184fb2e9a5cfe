//! Experiment configuration, loaded from JSON. Every field has a default,
//! so `{}` is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{ingest_dataset, synthetic_dataset, Synthetic};
use super::ExperimentError;
use crate::attack::{AttackConfig, AttackKind};
use crate::codec::{Architecture, QualityPreset, TrainConfig};
use crate::defense::LpdPolicy;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        generator: Synthetic,
        count: usize,
        seed: u64,
    },
    /// Every `.ppm` file of the directory, center-cropped and resized.
    Directory { path: PathBuf },
}

impl DataSource {
    pub fn load(&self, size: usize) -> Result<Vec<Tensor>, ExperimentError> {
        match self {
            DataSource::Synthetic { generator, count, seed } => Ok(synthetic_dataset(*generator, *count, size, *seed)),
            DataSource::Directory { path } => {
                let ingested = ingest_dataset(path, size)?;
                if ingested.images.is_empty() {
                    return Err(ExperimentError::Missing(format!(
                        "no readable images in {}",
                        path.display()
                    )));
                }
                Ok(ingested.images)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSource {
    pub name: String,
    pub source: DataSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub image_size: usize,
    /// Images the codecs are trained and their priors fitted on.
    pub train_data: DataSource,
    /// Evaluation datasets, one table column group each.
    pub datasets: Vec<NamedSource>,
    pub archs: Vec<Architecture>,
    pub qfs: Vec<u8>,
    pub pairs: usize,
    /// Seeds pair sampling; model initialization uses `init_seed`.
    pub seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub attacks: Vec<AttackKind>,
    pub lpd: LpdPolicy,
    pub epsilons: Vec<f64>,
    /// Where trained models are cached. Not part of the configuration hash.
    pub model_dir: Option<PathBuf>,
    /// Worker threads, 0 for one per core. Not part of the configuration
    /// hash.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_data: DataSource::Synthetic {
                generator: Synthetic::Faces,
                count: 64,
                seed: 1,
            },
            datasets: vec![
                NamedSource {
                    name: "faces".into(),
                    source: DataSource::Synthetic {
                        generator: Synthetic::Faces,
                        count: 40,
                        seed: 2,
                    },
                },
                NamedSource {
                    name: "scenes".into(),
                    source: DataSource::Synthetic {
                        generator: Synthetic::Scenes,
                        count: 40,
                        seed: 3,
                    },
                },
            ],
            archs: Architecture::ALL.to_vec(),
            qfs: (1..=QualityPreset::LADDER_LEN).collect(),
            pairs: 20,
            seed: 0,
            init_seed: 0,
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            attacks: AttackKind::ALL.to_vec(),
            lpd: LpdPolicy::default(),
            epsilons: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            model_dir: None,
            jobs: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        let c: Self = serde_json::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let s =
            std::fs::read_to_string(path).map_err(|e| ExperimentError::Missing(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of 16",
                self.image_size
            ));
        }
        if self.datasets.is_empty() || self.archs.is_empty() || self.qfs.is_empty() {
            return bad("datasets, archs and qfs must be non-empty".into());
        }
        if self.pairs == 0 {
            return bad("pairs must be at least 1".into());
        }
        for &qf in &self.qfs {
            QualityPreset::for_qf(qf).map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad("epsilons must be finite and non-negative".into());
        }
        if self.train.distortion_weight < 0.0 || !self.train.distortion_weight.is_finite() {
            return bad("train.distortion_weight must be finite and non-negative".into());
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("dataset names must be unique".into());
        }
        self.attack
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the fields that do not
    /// affect results (`model_dir`, `jobs`).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("model_dir");
            m.remove("jobs");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_index(&self, name: &str) -> Result<usize, ExperimentError> {
        self.datasets
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| ExperimentError::Config(format!("no dataset named {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trip_and_hash_ignore_jobs() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let other = ExperimentConfig {
            jobs: 7,
            model_dir: Some("/tmp/m".into()),
            ..c.clone()
        };
        assert_eq!(other.hash(), c.hash());
        let seeded = ExperimentConfig { seed: 1, ..c.clone() };
        assert_ne!(seeded.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn rejects_bad_values() {
        for s in [
            r#"{"pairs": 0}"#,
            r#"{"qfs": [6]}"#,
            r#"{"image_size": 40}"#,
            r#"{"epsilons": [-0.1]}"#,
            r#"{"attack": {"max_iterations": 0}}"#,
            r#"{"unknown": 1, "pairs": "x"}"#,
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(s), Err(ExperimentError::Config(_))),
                "{s}"
            );
        }
    }

    #[test]
    fn partial_nested_config() {
        let c = ExperimentConfig::from_json(
            r#"{"train": {"steps": 10}, "datasets": [{"name": "d", "source": {"kind": "directory", "path": "/x"}}]}"#,
        )
        .unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch, TrainConfig::default().batch);
        assert_eq!(c.dataset_index("d").unwrap(), 0);
        assert!(c.dataset_index("faces").is_err());
    }
}
