//! Dense tensors and the reverse-mode tape used by the codec, the trainer
//! and the attacks.
//!
//! Values are always stored as `f64`. The [`Precision`] tag records which
//! format the values are known to be representable in; converting to a
//! narrower precision rounds every element (see [`Tensor::to_precision`]).

pub mod conv;
pub mod half;
pub mod optim;
pub mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{conv2d, conv2d_transpose};
pub use optim::{adam_step, cosine_annealing_lr, Adam, AdamState};
pub use tape::{gdn, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data length {len} does not match shape {shape:?}")]
    Length { len: usize, shape: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Numeric format a tensor's values are representable in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
    /// IEEE binary16 emulated in integer arithmetic.
    F16,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}<{:?}>", self.shape, self.precision)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Length {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("Tensor::new"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            precision: Precision::F64,
        })
    }

    /// Constructor for internal callers that have already validated `data`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, precision }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n], Precision::F64)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value], Precision::F64)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Shape as `(N, C, H, W)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Shape(format!(
                "expected a 4-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Length {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Elementwise map; fails if the result contains NaN or infinity.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("Tensor::map"));
        }
        Ok(Self::from_parts(self.shape.clone(), data, Precision::F64))
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("Tensor::zip_map"));
        }
        Ok(Self::from_parts(self.shape.clone(), data, Precision::F64))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Rounds every value to the nearest value representable in `precision`
    /// (ties to even). Half precision saturates at the largest finite value.
    pub fn to_precision(&self, precision: Precision) -> Tensor {
        let data = match precision {
            Precision::F64 => self.data.clone(),
            Precision::F32 => self.data.iter().map(|&v| v as f32 as f64).collect(),
            Precision::F16 => self.data.iter().map(|&v| half::round_f16(v)).collect(),
        };
        Self::from_parts(self.shape.clone(), data, precision)
    }

    /// Sum in row-major order with a single sequential accumulator.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy of one sample `(1,C,H,W)` out of a batch `(N,C,H,W)`.
    pub fn sample(&self, n: usize) -> Result<Tensor> {
        let (batch, c, h, w) = self.dims4()?;
        if n >= batch {
            return Err(TensorError::Shape(format!("sample {n} of batch {batch}")));
        }
        let len = c * h * w;
        Ok(Self::from_parts(
            vec![1, c, h, w],
            self.data[n * len..(n + 1) * len].to_vec(),
            self.precision,
        ))
    }

    /// Stacks `(1,C,H,W)` tensors into a batch.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::Invalid("stack of zero tensors".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape != [1, c, h, w] {
                return Err(TensorError::Shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape,
                    [1, c, h, w]
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(vec![items.len(), c, h, w], data, Precision::F64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0; 3]),
            Err(TensorError::Length { .. })
        ));
        assert!(matches!(
            Tensor::new(&[1], vec![f64::NAN]),
            Err(TensorError::NonFinite(_))
        ));
        assert!(Tensor::new(&[1], vec![1.0]).unwrap().map(|v| v / 0.0).is_err());
    }

    #[test]
    fn precision_rounding() {
        let t = Tensor::new(&[3], vec![0.1, 1.0 + 2f64.powi(-11), 1e6]).unwrap();
        let f32t = t.to_precision(Precision::F32);
        assert_eq!(f32t.data()[0], 0.1f32 as f64);
        let h = t.to_precision(Precision::F16);
        assert_eq!(h.data()[1], 1.0);
        assert_eq!(h.data()[2], 65504.0);
        assert_eq!(h.precision(), Precision::F16);
    }

    #[test]
    fn stack_and_sample() {
        let a = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::full(&[1, 1, 2, 2], 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.sample(1).unwrap(), b);
    }
}
