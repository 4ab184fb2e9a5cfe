//! Trained-model cache. A model is identified by its architecture, quality
//! preset, training configuration, initialization seed and a digest of the
//! training images; the `.nicm` file is reused whenever all of them match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use super::{derive_seed, ExperimentError};
use crate::codec::io::{load_model, model_to_bytes, save_model};
use crate::codec::train::train_rd_with;
use crate::codec::{fit_prior, Architecture, CodecModel, ModelConfig, TrainConfig};
use crate::tensor::Tensor;

/// Digest of a list of images (shapes and `f64` bit patterns).
pub fn images_digest(images: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for img in images {
        for &d in img.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in img.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Digest of a model's serialized form.
pub fn model_digest(model: &CodecModel) -> Result<String, ExperimentError> {
    Ok(hex::encode(Sha256::digest(model_to_bytes(model)?)))
}

/// Trains a model at `qf` and fits its prior on `images`.
pub fn train_model(
    arch: Architecture,
    qf: u8,
    images: &[Tensor],
    train: &TrainConfig,
    init_seed: u64,
) -> Result<CodecModel, ExperimentError> {
    let config = ModelConfig::new(arch, qf)?;
    let seed = derive_seed(init_seed, u64::from(arch_index(arch)) * 16 + u64::from(qf));
    let init = CodecModel::init(config, seed)?;
    let (trained, report) = train_rd_with(&init, images, config.quality.lambda, train)?;
    let (first, last) = report.first_last_loss(50);
    log::info!("trained {arch} QF{qf}: loss {first:.3} -> {last:.3}");
    let prior = fit_prior(&trained, images)?;
    Ok(trained.with_entropy(prior)?)
}

fn arch_index(arch: Architecture) -> u8 {
    Architecture::ALL.iter().position(|&a| a == arch).unwrap_or(0) as u8
}

#[derive(Debug)]
pub struct ModelStore {
    dir: PathBuf,
    train: TrainConfig,
    init_seed: u64,
    images: Vec<Tensor>,
    images_digest: String,
    loaded: Mutex<BTreeMap<(Architecture, u8), Arc<CodecModel>>>,
    digests: Mutex<BTreeMap<String, String>>,
}

impl ModelStore {
    pub fn new(dir: impl Into<PathBuf>, train: TrainConfig, init_seed: u64, images: Vec<Tensor>) -> Self {
        let images_digest = images_digest(&images);
        Self {
            dir: dir.into(),
            train,
            init_seed,
            images,
            images_digest,
            loaded: Mutex::new(BTreeMap::new()),
            digests: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn training_images(&self) -> &[Tensor] {
        &self.images
    }

    /// Cache key of a model, the first 16 hex digits of a SHA-256.
    pub fn key(&self, arch: Architecture, qf: u8) -> String {
        let material = serde_json::json!({
            "arch": arch,
            "qf": qf,
            "train": self.train,
            "init_seed": self.init_seed,
            "images": self.images_digest,
        });
        hex::encode(Sha256::digest(material.to_string().as_bytes()))[..16].to_string()
    }

    pub fn path(&self, arch: Architecture, qf: u8) -> PathBuf {
        self.dir.join(format!("{arch}-qf{qf}-{}.nicm", self.key(arch, qf)))
    }

    /// Loads the cached model or trains and caches it. A cached file that
    /// fails to load is retrained and overwritten.
    pub fn get(&self, arch: Architecture, qf: u8) -> Result<Arc<CodecModel>, ExperimentError> {
        if let Some(m) = self.loaded.lock().expect("store lock").get(&(arch, qf)) {
            return Ok(Arc::clone(m));
        }
        let path = self.path(arch, qf);
        let model = match path.exists().then(|| load_model(&path)) {
            Some(Ok(m)) if m.entropy().is_some() => m,
            other => {
                if let Some(Err(e)) = other {
                    log::warn!("retraining {}: {e}", path.display());
                }
                let m = train_model(arch, qf, &self.images, &self.train, self.init_seed)?;
                std::fs::create_dir_all(&self.dir)?;
                save_model(&m, &path)?;
                m
            }
        };
        let digest = model_digest(&model)?;
        self.digests
            .lock()
            .expect("store lock")
            .insert(format!("{arch}-qf{qf}"), digest);
        let model = Arc::new(model);
        self.loaded
            .lock()
            .expect("store lock")
            .entry((arch, qf))
            .or_insert_with(|| Arc::clone(&model));
        Ok(model)
    }

    /// `name -> sha256` of every model handed out so far.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.digests.lock().expect("store lock").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::data::{synthetic_dataset, Synthetic};

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 2,
            crop: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn caches_on_disk_and_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let images = synthetic_dataset(Synthetic::Faces, 3, 32, 1);
        let store = ModelStore::new(dir.path(), tiny_train(), 0, images.clone());
        let a = store.get(Architecture::FpGdn, 1).unwrap();
        assert!(store.path(Architecture::FpGdn, 1).exists());
        assert!(Arc::ptr_eq(&a, &store.get(Architecture::FpGdn, 1).unwrap()));
        let again = ModelStore::new(dir.path(), tiny_train(), 0, images.clone());
        assert_eq!(*again.get(Architecture::FpGdn, 1).unwrap(), *a);
        assert_eq!(store.digests(), again.digests());

        let other = ModelStore::new(dir.path(), tiny_train(), 1, images);
        assert_ne!(other.key(Architecture::FpGdn, 1), store.key(Architecture::FpGdn, 1));
        assert_ne!(store.key(Architecture::FpRelu, 1), store.key(Architecture::FpGdn, 1));
    }

    #[test]
    fn corrupt_cache_is_retrained() {
        let dir = tempfile::tempdir().unwrap();
        let images = synthetic_dataset(Synthetic::Faces, 2, 32, 1);
        let store = ModelStore::new(dir.path(), tiny_train(), 0, images.clone());
        std::fs::write(store.path(Architecture::FpRelu, 1), b"junk").unwrap();
        let m = store.get(Architecture::FpRelu, 1).unwrap();
        assert_eq!(
            *m,
            train_model(Architecture::FpRelu, 1, &images, &tiny_train(), 0).unwrap()
        );
    }
}
