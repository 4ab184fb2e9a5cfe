//! Layer stacks shared by the differentiable `f64` path and the `f32`
//! compression path.

use std::collections::BTreeMap;

use crate::tensor::conv::{conv2d_direct_f32, conv2d_transpose_direct_f32, ConvGeom};
use crate::tensor::half::round_f16;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    /// Strided convolution with weight `{name}.weight` and bias `{name}.bias`.
    Conv {
        name: String,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// Transposed convolution; the weight is laid out `(C_in, C_out, k, k)`.
    ConvT {
        name: String,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// GDN (or inverse GDN) with `{name}.beta` and `{name}.gamma`.
    Gdn {
        name: String,
        inverse: bool,
    },
    Relu,
}

impl Layer {
    pub fn conv(name: impl Into<String>, k: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv {
            name: name.into(),
            k,
            stride,
            pad,
        }
    }

    pub fn conv_t(name: impl Into<String>, k: usize, stride: usize, pad: usize) -> Self {
        Layer::ConvT {
            name: name.into(),
            k,
            stride,
            pad,
        }
    }

    pub fn gdn(name: impl Into<String>, inverse: bool) -> Self {
        Layer::Gdn {
            name: name.into(),
            inverse,
        }
    }
}

fn param<'a, T>(map: &'a BTreeMap<String, T>, name: &str) -> Result<&'a T, TensorError> {
    map.get(name)
        .ok_or_else(|| TensorError::Invalid(format!("missing parameter {name}")))
}

/// Runs `layers` on the tape. `params` maps parameter names to tape values.
pub fn run_tape(layers: &[Layer], tape: &mut Tape, params: &BTreeMap<String, Var>, x: Var) -> Result<Var, TensorError> {
    run_tape_with(layers, tape, params, x, false)
}

/// Like [`run_tape`]; with `round_f16` set every layer output is rounded to
/// half precision with a straight-through gradient.
pub fn run_tape_with(
    layers: &[Layer],
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    mut x: Var,
    round_f16: bool,
) -> Result<Var, TensorError> {
    for layer in layers {
        x = match layer {
            Layer::Conv { name, stride, pad, .. } => {
                let w = *param(params, &format!("{name}.weight"))?;
                let b = *param(params, &format!("{name}.bias"))?;
                tape.conv2d(x, w, Some(b), *stride, *pad)?
            }
            Layer::ConvT { name, stride, pad, .. } => {
                let w = *param(params, &format!("{name}.weight"))?;
                let b = *param(params, &format!("{name}.bias"))?;
                tape.conv2d_transpose(x, w, Some(b), *stride, *pad)?
            }
            Layer::Gdn { name, inverse } => {
                let beta = *param(params, &format!("{name}.beta"))?;
                let gamma = *param(params, &format!("{name}.gamma"))?;
                tape.gdn(x, beta, gamma, *inverse)?
            }
            Layer::Relu => tape.relu(x)?,
        };
        if round_f16 {
            x = tape.round_f16_st(x)?;
        }
    }
    Ok(x)
}

/// Feature map of a single sample in the `f32` path.
#[derive(Debug, Clone, PartialEq)]
pub struct Map32 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Map32 {
    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 {
            return Err(TensorError::Shape(format!("expected one sample, got {n}")));
        }
        Ok(Self {
            c,
            h,
            w,
            data: t.data().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.c, self.h, self.w],
            self.data.iter().map(|&v| f64::from(v)).collect(),
            crate::tensor::Precision::F32,
        )
    }

    fn round_to_f16(&mut self) {
        for v in &mut self.data {
            *v = round_f16(f64::from(*v)) as f32;
        }
    }
}

/// Runs `layers` on one sample in single precision with fixed summation
/// order. With `round_f16` set, every layer output is rounded to half
/// precision before it is passed on.
pub fn run_f32(
    layers: &[Layer],
    params: &BTreeMap<String, Vec<f32>>,
    mut x: Map32,
    round_f16: bool,
) -> Result<Map32, TensorError> {
    for layer in layers {
        x = match layer {
            Layer::Conv { name, k, stride, pad } => {
                let w = param(params, &format!("{name}.weight"))?;
                let b = param(params, &format!("{name}.bias"))?;
                let c_out = b.len();
                if w.len() != c_out * x.c * k * k {
                    return Err(TensorError::Shape(format!(
                        "{name}: weight does not match input channels"
                    )));
                }
                let g = ConvGeom::new(x.c, x.h, x.w, c_out, *k, *k, *stride, *pad)?;
                Map32 {
                    c: c_out,
                    h: g.ho,
                    w: g.wo,
                    data: conv2d_direct_f32(&x.data, &g, w, b),
                }
            }
            Layer::ConvT { name, k, stride, pad } => {
                let w = param(params, &format!("{name}.weight"))?;
                let b = param(params, &format!("{name}.bias"))?;
                let c_to = b.len();
                if w.len() != c_to * x.c * k * k {
                    return Err(TensorError::Shape(format!(
                        "{name}: weight does not match input channels"
                    )));
                }
                let h = crate::tensor::conv::transpose_out_dim(x.h, *k, *stride, *pad)?;
                let w_out = crate::tensor::conv::transpose_out_dim(x.w, *k, *stride, *pad)?;
                let g = ConvGeom::new(c_to, h, w_out, x.c, *k, *k, *stride, *pad)?;
                Map32 {
                    c: c_to,
                    h,
                    w: w_out,
                    data: conv2d_transpose_direct_f32(&x.data, &g, w, b),
                }
            }
            Layer::Gdn { name, inverse } => {
                let beta = param(params, &format!("{name}.beta"))?;
                let gamma = param(params, &format!("{name}.gamma"))?;
                gdn_f32(&x, beta, gamma, *inverse)?
            }
            Layer::Relu => Map32 {
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                ..x
            },
        };
        if round_f16 {
            x.round_to_f16();
        }
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("f32 forward pass"));
    }
    Ok(x)
}

/// Per pixel: the norm starts at `beta[c]` and adds `gamma[c][j] * x_j^2`
/// for `j` ascending.
fn gdn_f32(x: &Map32, beta: &[f32], gamma: &[f32], inverse: bool) -> Result<Map32, TensorError> {
    let c = x.c;
    if beta.len() != c || gamma.len() != c * c {
        return Err(TensorError::Shape("gdn parameters do not match channels".into()));
    }
    let plane = x.h * x.w;
    let mut out = vec![0f32; x.data.len()];
    let mut sq = vec![0f32; c];
    for p in 0..plane {
        for (j, s) in sq.iter_mut().enumerate() {
            let v = x.data[j * plane + p];
            *s = v * v;
        }
        for ci in 0..c {
            let mut acc = beta[ci];
            for (j, s) in sq.iter().enumerate() {
                acc += gamma[ci * c + j] * s;
            }
            let n = acc.sqrt();
            let v = x.data[ci * plane + p];
            out[ci * plane + p] = if inverse { v * n } else { v / n };
        }
    }
    Ok(Map32 {
        c,
        h: x.h,
        w: x.w,
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale) as f32 as f64).collect()
    }

    #[test]
    fn f32_path_tracks_tape_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![
            Layer::conv("a", 4, 2, 1),
            Layer::gdn("g", false),
            Layer::Relu,
            Layer::conv_t("t", 4, 2, 1),
            Layer::gdn("h", true),
        ];
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.weight".to_string(),
            Tensor::new(&[4, 3, 4, 4], rand_vec(192, &mut rng, 0.3)).unwrap(),
        );
        tensors.insert(
            "a.bias".to_string(),
            Tensor::new(&[4], rand_vec(4, &mut rng, 0.1)).unwrap(),
        );
        tensors.insert("g.beta".to_string(), Tensor::full(&[4], 1.0));
        tensors.insert("g.gamma".to_string(), Tensor::full(&[4, 4], 0.1));
        tensors.insert(
            "t.weight".to_string(),
            Tensor::new(&[4, 2, 4, 4], rand_vec(128, &mut rng, 0.3)).unwrap(),
        );
        tensors.insert(
            "t.bias".to_string(),
            Tensor::new(&[2], rand_vec(2, &mut rng, 0.1)).unwrap(),
        );
        tensors.insert("h.beta".to_string(), Tensor::full(&[2], 1.0));
        tensors.insert("h.gamma".to_string(), Tensor::full(&[2, 2], 0.05));
        let x = Tensor::new(
            &[1, 3, 8, 8],
            (0..192).map(|_| rng.gen_range(0.0..1.0f32) as f64).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let xv = tape.constant(x.clone());
        let out = run_tape(&layers, &mut tape, &vars, xv).unwrap();
        let reference = tape.value(out).clone();

        let p32: BTreeMap<String, Vec<f32>> = tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.data().iter().map(|&d| d as f32).collect()))
            .collect();
        let got = run_f32(&layers, &p32, Map32::from_tensor(&x).unwrap(), false).unwrap();
        assert_eq!(got.to_tensor().shape(), reference.shape());
        for (a, b) in got.data.iter().zip(reference.data()) {
            assert!((f64::from(*a) - b).abs() < 1e-5, "{a} vs {b}");
        }
        let half = run_f32(&layers, &p32, Map32::from_tensor(&x).unwrap(), true).unwrap();
        assert!(half.data.iter().all(|&v| f64::from(v) == round_f16(f64::from(v))));
        let again = run_f32(&layers, &p32, Map32::from_tensor(&x).unwrap(), false).unwrap();
        assert_eq!(got, again);
    }
}
