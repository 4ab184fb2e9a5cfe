//! Bitstream-collision workbench for a miniature learned image codec.

pub mod attack;
pub mod codec;
pub mod defense;
pub mod experiments;
pub mod imageio;
pub mod metrics;
pub mod tensor;
pub mod theory;
