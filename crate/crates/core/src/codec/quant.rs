use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::tensor::Tensor;

/// Integer symbols with the shape of the latent they came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Symbols {
    shape: Vec<usize>,
    values: Vec<i32>,
}

impl Symbols {
    pub fn new(shape: Vec<usize>, values: Vec<i32>) -> Result<Self, CodecError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(CodecError::Corrupt(format!(
                "{} symbols do not fill shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    /// Reconstruction `s * step` as a tensor.
    pub fn dequantize(&self, step: f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.values.iter().map(|&s| f64::from(s) * step).collect(),
            crate::tensor::Precision::F64,
        )
    }
}

/// `round(v / step)` with ties away from zero.
pub fn quantize_value(v: f64, step: f64) -> Result<i32, CodecError> {
    let q = (v / step).round();
    if !q.is_finite() || q.abs() > f64::from(i32::MAX / 2) {
        return Err(CodecError::Quantize(format!("{v} / {step} does not fit a symbol")));
    }
    Ok(q as i32)
}

/// Quantizes every element of `z` with ties away from zero.
pub fn quantize(z: &Tensor, step: f64) -> Result<Symbols, CodecError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(CodecError::Quantize(format!("step must be positive, got {step}")));
    }
    let values = z
        .data()
        .iter()
        .map(|&v| quantize_value(v, step))
        .collect::<Result<Vec<_>, _>>()?;
    Symbols::new(z.shape().to_vec(), values)
}

/// Like [`quantize`], but also fails when a symbol falls outside the range
/// covered by `prior`.
pub fn quantize_in_range(z: &Tensor, step: f64, prior: &super::prior::FactorizedPrior) -> Result<Symbols, CodecError> {
    let s = quantize(z, step)?;
    prior.check_range(&s)?;
    Ok(s)
}
