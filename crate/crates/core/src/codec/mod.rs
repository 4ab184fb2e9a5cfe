//! The miniature learned codec: analysis transform, quantizer, static
//! entropy model with a range coder, synthesis transform, and the
//! rate-distortion trainer.

pub mod bitstream;
pub mod entropy;
pub mod io;
pub mod layers;
pub mod model;
pub mod prior;
pub mod quant;
pub mod rangecoder;
pub mod train;

use thiserror::Error;

use crate::tensor::TensorError;

pub use bitstream::{Bitstream, Compressed, Header};
pub use entropy::{fit_prior, EntropyModel, ScaleTables};
pub use model::{
    compress, decompress, encode_latent, Architecture, CodecModel, ModelConfig, PrecisionPlan, QualityPreset,
};
pub use prior::{entropy_decode, entropy_encode, ChannelTable, FactorizedPrior};
pub use quant::{quantize, quantize_in_range, Symbols};
pub use train::{train_rd, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("symbol {symbol} in channel {channel} outside prior range [{min}, {max}]")]
    SymbolOutOfRange {
        symbol: i32,
        channel: usize,
        min: i32,
        max: i32,
    },
    #[error("quantization failed: {0}")]
    Quantize(String),
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("model has no fitted entropy model")]
    PriorNotFitted,
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("bad model: {0}")]
    BadModel(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
