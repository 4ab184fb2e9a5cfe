//! Experiment plumbing: configuration, datasets, pair suites, model
//! caching and the table drivers behind the CLI verbs.

pub mod config;
pub mod data;
pub mod store;
pub mod suite;
pub mod tables;

pub use config::{DataSource, ExperimentConfig, NamedSource};
pub use store::ModelStore;
pub use suite::PairSuite;
pub use tables::{EpsPoint, Table, TransferMatrix, Workbench};

use thiserror::Error;

use crate::attack::AttackError;
use crate::codec::CodecError;
use crate::imageio::ImageError;
use crate::metrics::MetricError;
use crate::tensor::TensorError;
use crate::theory::TheoryError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration errors, 3 for missing inputs,
    /// 4 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Attack(AttackError::Config(_)) => 2,
            ExperimentError::Theory(TheoryError::Invalid(_)) => 2,
            ExperimentError::Missing(_) => 3,
            ExperimentError::Numeric(_) | ExperimentError::Attack(AttackError::NonFinite { .. }) => 4,
            ExperimentError::Tensor(TensorError::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}

/// splitmix64 step applied to `seed + index`; gives independent streams for
/// workers, images and pairs.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
