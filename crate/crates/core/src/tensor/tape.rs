//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it saved for the backward pass. [`Tape::backward`] walks the nodes once,
//! newest first, accumulating adjoints into the operands that require
//! gradients.

use super::conv::{self, ConvGeom};
use super::{Precision, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvT {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Gdn {
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
        norm: Vec<f64>,
    },
    Relu(Var),
    /// Forward rounding to half precision, identity gradient.
    RoundF16(Var),
    Abs(Var),
    Tanh(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Sum(Var),
    Norm(Var),
    Cosine(Var, Var),
    ScalarDiv(Var, Var),
    LogisticRate {
        y: Var,
        log_scale: Var,
        step: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(what))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Lower bound on per-symbol likelihood inside the rate proxy.
const LIKELIHOOD_FLOOR: f64 = 1e-9;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Only leaves with `requires_grad` (and values derived
    /// from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn unary(&mut self, x: Var, what: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        check_finite(&data, what)?;
        let value = Tensor::from_parts(xv.shape().to_vec(), data, Precision::F64);
        let rg = self.requires(x);
        Ok(self.push(value, op, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            av.expect_same_shape(bv)?;
            let data: Vec<f64> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            check_finite(&data, what)?;
            Tensor::from_parts(av.shape().to_vec(), data, Precision::F64)
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, op, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (value, geom, cols) =
            conv::conv2d_f64(self.value(x), self.value(k), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.requires(x) || self.requires(k) || b.is_some_and(|b| self.requires(b));
        // im2col columns are only needed for the kernel gradient.
        let cols = if self.requires(k) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv { x, k, b, geom, cols }, rg))
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (value, geom) =
            conv::conv2d_transpose_f64(self.value(x), self.value(k), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.requires(x) || self.requires(k) || b.is_some_and(|b| self.requires(b));
        Ok(self.push(value, Op::ConvT { x, k, b, geom }, rg))
    }

    /// Generalized divisive normalization over channels:
    /// `y_c = x_c / sqrt(beta_c + sum_j gamma[c][j] * x_j^2)`, or the product
    /// form when `inverse` is set.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let (value, norm) = gdn_forward(self.value(x), self.value(beta), self.value(gamma), inverse)?;
        let rg = self.requires(x) || self.requires(beta) || self.requires(gamma);
        Ok(self.push(
            value,
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
                norm,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    /// Rounds to the nearest half-precision value in the forward pass and
    /// passes gradients through unchanged (straight-through estimator).
    pub fn round_f16_st(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "round_f16", super::half::round_f16, Op::RoundF16(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "abs", f64::abs, Op::Abs(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", softplus, Op::Softplus(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, "affine", |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        check_finite(&[s], "sum")?;
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Euclidean norm of all elements. The gradient at zero is taken as zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).norm();
        check_finite(&[n], "norm")?;
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(n), Op::Norm(x), rg))
    }

    /// Cosine similarity of two equally shaped tensors, flattened. Returns 0
    /// (with a warning) when either vector has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let dot = av.dot(bv)?;
        let (na, nb) = (av.norm(), bv.norm());
        let cs = if na == 0.0 || nb == 0.0 {
            log::warn!("cosine similarity of a zero-norm vector; using 0");
            0.0
        } else {
            dot / (na * nb)
        };
        check_finite(&[cs], "cosine")?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(cs), Op::Cosine(a, b), rg))
    }

    /// Quotient of two single-element tensors.
    pub fn scalar_div(&mut self, a: Var, b: Var) -> Result<Var> {
        let q = self.value(a).item()? / self.value(b).item()?;
        check_finite(&[q], "scalar_div")?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(q), Op::ScalarDiv(a, b), rg))
    }

    /// Total code length in bits of `y` under a zero-mean logistic density,
    /// integrated over the quantization bin of width `step` around each
    /// value. `log_scale` holds either one log-scale per channel or one per
    /// element of `y`.
    pub fn logistic_rate(&mut self, y: Var, log_scale: Var, step: f64) -> Result<Var> {
        let (_, c, h, w) = self.value(y).dims4()?;
        let per_element = self.value(log_scale).shape() == self.value(y).shape();
        if !per_element && self.value(log_scale).numel() != c {
            return Err(TensorError::Shape(
                "log_scale must have one entry per channel or per element".into(),
            ));
        }
        let ls = self.value(log_scale).data().to_vec();
        let plane = h * w;
        let mut bits = 0.0;
        for (i, &v) in self.value(y).data().iter().enumerate() {
            let a = ls[scale_index(i, plane, c, per_element)].exp();
            let (p, _, _) = logistic_bin(v, a, step);
            bits -= p.max(LIKELIHOOD_FLOOR).log2();
        }
        check_finite(&[bits], "logistic_rate")?;
        let rg = self.requires(y) || self.requires(log_scale);
        Ok(self.push(Tensor::scalar(bits), Op::LogisticRate { y, log_scale, step }, rg))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    /// Values that do not influence `loss` get zero gradients.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        wrt.iter()
            .map(|&v| {
                let shape = self.value(v).shape().to_vec();
                let data = match grads.get(v.0).and_then(|g| g.clone()) {
                    Some(d) => d,
                    None => vec![0.0; self.value(v).numel()],
                };
                check_finite(&data, "backward")?;
                Ok(Tensor::from_parts(shape, data, Precision::F64))
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, geom, cols } => {
                let n = self.value(*x).shape()[0];
                let per_out = geom.c_out * geom.out_pixels();
                let per_in = geom.c_in * geom.h * geom.w;
                let per_cols = geom.patch_len() * geom.out_pixels();
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for s in 0..n {
                            for (co, chunk) in g[s * per_out..(s + 1) * per_out].chunks(geom.out_pixels()).enumerate() {
                                gb[co] += chunk.iter().sum::<f64>();
                            }
                        }
                    });
                }
                let kv = self.value(*k).data();
                self.accumulate(grads, *k, |gk| {
                    for s in 0..n {
                        conv::gemm(
                            geom.c_out,
                            geom.out_pixels(),
                            geom.patch_len(),
                            &g[s * per_out..(s + 1) * per_out],
                            false,
                            &cols[s * per_cols..(s + 1) * per_cols],
                            true,
                            gk,
                            true,
                        );
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dcols = vec![0.0; per_cols];
                    for s in 0..n {
                        conv::gemm(
                            geom.patch_len(),
                            geom.c_out,
                            geom.out_pixels(),
                            kv,
                            true,
                            &g[s * per_out..(s + 1) * per_out],
                            false,
                            &mut dcols,
                            false,
                        );
                        conv::col2im(&dcols, geom, &mut gx[s * per_in..(s + 1) * per_in]);
                    }
                });
            }
            Op::ConvT { x, k, b, geom } => {
                let n = self.value(*x).shape()[0];
                // Forward-conv geometry: the transposed output is geom's input.
                let per_y = geom.c_in * geom.h * geom.w;
                let per_x = geom.c_out * geom.out_pixels();
                let per_cols = geom.patch_len() * geom.out_pixels();
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for s in 0..n {
                            for (c, chunk) in g[s * per_y..(s + 1) * per_y].chunks(geom.h * geom.w).enumerate() {
                                gb[c] += chunk.iter().sum::<f64>();
                            }
                        }
                    });
                }
                let need_x = self.requires(*x);
                let need_k = self.requires(*k);
                if need_x || need_k {
                    let mut dcols = vec![0.0; n * per_cols];
                    for s in 0..n {
                        conv::im2col(
                            &g[s * per_y..(s + 1) * per_y],
                            geom,
                            &mut dcols[s * per_cols..(s + 1) * per_cols],
                        );
                    }
                    let kv = self.value(*k).data();
                    let xv = self.value(*x).data();
                    self.accumulate(grads, *x, |gx| {
                        for s in 0..n {
                            conv::gemm(
                                geom.c_out,
                                geom.patch_len(),
                                geom.out_pixels(),
                                kv,
                                false,
                                &dcols[s * per_cols..(s + 1) * per_cols],
                                false,
                                &mut gx[s * per_x..(s + 1) * per_x],
                                true,
                            );
                        }
                    });
                    self.accumulate(grads, *k, |gk| {
                        for s in 0..n {
                            conv::gemm(
                                geom.c_out,
                                geom.out_pixels(),
                                geom.patch_len(),
                                &xv[s * per_x..(s + 1) * per_x],
                                false,
                                &dcols[s * per_cols..(s + 1) * per_cols],
                                true,
                                gk,
                                true,
                            );
                        }
                    });
                }
            }
            Op::Gdn {
                x,
                beta,
                gamma,
                inverse,
                norm,
            } => {
                self.gdn_backward(*x, *beta, *gamma, *inverse, norm, g, grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::RoundF16(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        } else if xi < 0.0 {
                            *d -= gi;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(yv) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gi * sigmoid(xi);
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi)
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Norm(x) => {
                let n = node.value.data()[0];
                if n > 0.0 {
                    let xv = self.value(*x).data();
                    let s = g[0] / n;
                    self.accumulate(grads, *x, |gx| gx.iter_mut().zip(xv).for_each(|(d, xi)| *d += s * xi));
                }
            }
            Op::Cosine(a, b) => {
                let cs = node.value.data()[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb) = (av.norm(), bv.norm());
                if na > 0.0 && nb > 0.0 {
                    let (ad, bd) = (av.data(), bv.data());
                    let inv = 1.0 / (na * nb);
                    self.accumulate(grads, *a, |ga| {
                        for ((d, ai), bi) in ga.iter_mut().zip(ad).zip(bd) {
                            *d += g[0] * (bi * inv - cs * ai / (na * na));
                        }
                    });
                    self.accumulate(grads, *b, |gb| {
                        for ((d, ai), bi) in gb.iter_mut().zip(ad).zip(bd) {
                            *d += g[0] * (ai * inv - cs * bi / (nb * nb));
                        }
                    });
                }
            }
            Op::ScalarDiv(a, b) => {
                let (av, bv) = (self.value(*a).data()[0], self.value(*b).data()[0]);
                self.accumulate(grads, *a, |ga| ga[0] += g[0] / bv);
                self.accumulate(grads, *b, |gb| gb[0] -= g[0] * av / (bv * bv));
            }
            Op::LogisticRate { y, log_scale, step } => {
                let yv = self.value(*y);
                let (_, c, h, w) = yv.dims4()?;
                let plane = h * w;
                let ls = self.value(*log_scale).data();
                let per_element = ls.len() == yv.numel() && self.value(*log_scale).shape() == yv.shape();
                let mut gy = vec![0.0; yv.numel()];
                let mut gls = vec![0.0; ls.len()];
                let ln2 = std::f64::consts::LN_2;
                for (i, &v) in yv.data().iter().enumerate() {
                    let ch = scale_index(i, plane, c, per_element);
                    let a = ls[ch].exp();
                    let (p, dp_dy, dp_dlog) = logistic_bin(v, a, *step);
                    if p <= LIKELIHOOD_FLOOR {
                        continue;
                    }
                    let coef = -g[0] / (p * ln2);
                    gy[i] = coef * dp_dy;
                    gls[ch] += coef * dp_dlog;
                }
                self.accumulate(grads, *y, |d| d.iter_mut().zip(&gy).for_each(|(d, v)| *d += v));
                self.accumulate(grads, *log_scale, |d| d.iter_mut().zip(&gls).for_each(|(d, v)| *d += v));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn gdn_backward(
        &self,
        x: Var,
        beta: Var,
        gamma: Var,
        inverse: bool,
        norm: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4().expect("gdn input is 4-d");
        let plane = h * w;
        let gam = self.value(gamma).data();
        // t = g * x * norm^-3/2 (forward) or g * x * norm^-1/2 (inverse).
        let mut t = vec![0.0; xv.numel()];
        for i in 0..t.len() {
            let nv = norm[i];
            t[i] = if inverse {
                g[i] * xv.data()[i] / nv.sqrt()
            } else {
                g[i] * xv.data()[i] / (nv * nv.sqrt())
            };
        }
        let sign = if inverse { 0.5 } else { -0.5 };
        let per = c * plane;
        self.accumulate(grads, beta, |gb| {
            for (i, tv) in t.iter().enumerate() {
                gb[(i / plane) % c] += sign * tv;
            }
        });
        self.accumulate(grads, gamma, |gg| {
            let sq: Vec<f64> = xv.data().iter().map(|v| v * v).collect();
            let mut tmp = vec![0.0; c * c];
            for s in 0..n {
                conv::gemm(
                    c,
                    plane,
                    c,
                    &t[s * per..(s + 1) * per],
                    false,
                    &sq[s * per..(s + 1) * per],
                    true,
                    &mut tmp,
                    false,
                );
                gg.iter_mut().zip(&tmp).for_each(|(d, v)| *d += sign * v);
            }
        });
        self.accumulate(grads, x, |gx| {
            let mut gt = vec![0.0; per];
            for s in 0..n {
                // (gamma^T t) per pixel
                conv::gemm(
                    c,
                    c,
                    plane,
                    gam,
                    true,
                    &t[s * per..(s + 1) * per],
                    false,
                    &mut gt,
                    false,
                );
                for i in 0..per {
                    let gi = s * per + i;
                    let nv = norm[gi];
                    let direct = if inverse { g[gi] * nv.sqrt() } else { g[gi] / nv.sqrt() };
                    // d/dx_j of the normalizer contributes 2*x_j*gamma[c][j]*(...)
                    gx[gi] += direct + 2.0 * sign * xv.data()[gi] * gt[i];
                }
            }
        });
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Probability mass of `[v - step/2, v + step/2]` under a zero-mean logistic
/// with scale `a`, plus its derivatives with respect to `v` and `ln a`.
fn scale_index(i: usize, plane: usize, channels: usize, per_element: bool) -> usize {
    if per_element {
        i
    } else {
        (i / plane) % channels
    }
}

fn logistic_bin(v: f64, a: f64, step: f64) -> (f64, f64, f64) {
    // Mirror to the negative side to avoid cancellation in the upper tail.
    let sgn = if v > 0.0 { -1.0 } else { 1.0 };
    let m = sgn * v;
    let upper = (m + step / 2.0) / a;
    let lower = (m - step / 2.0) / a;
    let (su, sl) = (sigmoid(upper), sigmoid(lower));
    let p = su - sl;
    let (du, dl) = (su * (1.0 - su), sl * (1.0 - sl));
    let dp_dm = (du - dl) / a;
    let dp_dlog = -(du * upper - dl * lower);
    (p, sgn * dp_dm, dp_dlog)
}

pub(crate) fn gdn_forward(x: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<(Tensor, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    if beta.numel() != c || gamma.shape() != [c, c] {
        return Err(TensorError::Shape(format!(
            "gdn with {c} channels needs beta ({c}) and gamma ({c},{c}), got {:?} and {:?}",
            beta.shape(),
            gamma.shape()
        )));
    }
    if beta.data().iter().any(|&b| b <= 0.0) {
        return Err(TensorError::Invalid("gdn beta must be strictly positive".into()));
    }
    if gamma.data().iter().any(|&g| g < 0.0) {
        return Err(TensorError::Invalid("gdn gamma must be non-negative".into()));
    }
    let plane = h * w;
    let per = c * plane;
    let sq: Vec<f64> = x.data().iter().map(|v| v * v).collect();
    let mut norm = vec![0.0; x.numel()];
    for s in 0..n {
        let ns = &mut norm[s * per..(s + 1) * per];
        for (ch, chunk) in ns.chunks_mut(plane).enumerate() {
            chunk.fill(beta.data()[ch]);
        }
        conv::gemm(
            c,
            c,
            plane,
            gamma.data(),
            false,
            &sq[s * per..(s + 1) * per],
            false,
            ns,
            true,
        );
    }
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(&norm)
        .map(|(&v, &nv)| if inverse { v * nv.sqrt() } else { v / nv.sqrt() })
        .collect();
    check_finite(&data, "gdn")?;
    Ok((Tensor::from_parts(x.shape().to_vec(), data, Precision::F64), norm))
}

/// Stand-alone GDN (no tape).
pub fn gdn(input: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    gdn_forward(input, beta, gamma, inverse).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
    }

    /// Max relative error between tape gradients and central differences of
    /// `f` around `x0`.
    fn check_grad(x0: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = f(&mut tape, x);
        let g = tape.backward(loss, &[x]).unwrap().remove(0);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut d = x0.clone().into_data();
                d[i] += delta;
                let mut t = Tape::new();
                let xv = t.leaf(Tensor::new(x0.shape(), d).unwrap(), true);
                let l = f(&mut t, xv);
                t.value(l).item().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_distance_gradient() {
        let mut tape = Tape::new();
        let xt = Tensor::new(&[3], vec![1.0, 2.0, -1.0]).unwrap();
        let tt = Tensor::new(&[3], vec![0.5, 2.5, 1.0]).unwrap();
        let x = tape.leaf(xt.clone(), true);
        let t = tape.constant(tt.clone());
        let d = tape.sub(x, t).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l, &[x, t]).unwrap();
        for i in 0..3 {
            assert_eq!(g[0].data()[i], 2.0 * (xt.data()[i] - tt.data()[i]));
        }
        // constants do not receive gradients
        assert!(g[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2], 1.0), true);
        let b = tape.leaf(Tensor::full(&[3], 1.0), true);
        let l = tape.sum(a).unwrap();
        let g = tape.backward(l, &[b]).unwrap();
        assert_eq!(g[0].data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2], 1.0), true);
        assert!(matches!(tape.backward(a, &[a]), Err(TensorError::Shape(_))));
    }

    #[test]
    fn gdn_reference_values() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = gdn(&x, &Tensor::full(&[1], 0.5), &Tensor::full(&[1, 1], 1.0), false).unwrap();
        assert!((y.data()[0] - 2.0 / 4.5f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 3, 4, 4], &mut rng, -2.0, 2.0);
        let y = gdn(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3, 3]), false).unwrap();
        assert_eq!(y, x);
        assert!(gdn(&x, &Tensor::full(&[3], 0.0), &Tensor::zeros(&[3, 3]), false).is_err());
    }

    #[test]
    fn inverse_gdn_undoes_weak_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[1, 4, 5, 5], &mut rng, -1.0, 1.0);
        let beta = rand_tensor(&[4], &mut rng, 0.5, 2.0);
        let gamma = rand_tensor(&[4, 4], &mut rng, 0.0, 1e-8);
        let y = gdn(&x, &beta, &gamma, false).unwrap();
        let back = gdn(&y, &beta, &gamma, true).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&[2, 3, 6, 6], &mut rng, -1.0, 1.0);
        let k = rand_tensor(&[4, 3, 4, 4], &mut rng, -0.5, 0.5);
        let kt = rand_tensor(&[4, 2, 4, 4], &mut rng, -0.5, 0.5);
        let bias = rand_tensor(&[4], &mut rng, -0.5, 0.5);
        let beta = rand_tensor(&[4], &mut rng, 0.5, 1.5);
        let gamma = rand_tensor(&[4, 4], &mut rng, 0.0, 0.5);
        let err = check_grad(&x0, |t, x| {
            let k = t.constant(k.clone());
            let b = t.constant(bias.clone());
            let y = t.conv2d(x, k, Some(b), 2, 1).unwrap();
            let be = t.constant(beta.clone());
            let ga = t.constant(gamma.clone());
            let y = t.gdn(y, be, ga, false).unwrap();
            let y2 = t.gdn(y, be, ga, true).unwrap();
            let kt = t.constant(kt.clone());
            let z = t.conv2d_transpose(y2, kt, None, 2, 1).unwrap();
            let z = t.tanh(z).unwrap();
            let z = t.mul(z, z).unwrap();
            t.sum(z).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[2, 2, 6, 6], &mut rng, -1.0, 1.0);
        let k0 = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
        let gamma = rand_tensor(&[3, 3], &mut rng, 0.1, 0.5);
        let beta = rand_tensor(&[3], &mut rng, 0.5, 1.5);
        let kt = rand_tensor(&[3, 2, 4, 4], &mut rng, -0.5, 0.5);
        let err = check_grad(&k0, |t, k| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, k, None, 1, 1).unwrap();
            let y = t.relu(y).unwrap();
            let s = t.sum(y).unwrap();
            let n = t.norm(y).unwrap();
            t.scalar_div(s, n).unwrap()
        });
        assert!(err < 1e-4, "conv kernel: {err}");
        let err = check_grad(&gamma, |t, g| {
            let xv = t.constant(x.sample(0).unwrap());
            let k = t.constant(k0.clone());
            let y = t.conv2d(xv, k, None, 1, 1).unwrap();
            let b = t.constant(beta.clone());
            let y = t.gdn(y, b, g, true).unwrap();
            t.sum(y).unwrap()
        });
        assert!(err < 1e-4, "gdn gamma: {err}");
        let err = check_grad(&beta, |t, b| {
            let xv = t.constant(x.clone());
            let k = t.constant(k0.clone());
            let y = t.conv2d(xv, k, None, 1, 1).unwrap();
            let ga = t.constant(gamma.clone());
            let y = t.gdn(y, b, ga, false).unwrap();
            let y = t.mul(y, y).unwrap();
            t.sum(y).unwrap()
        });
        assert!(err < 1e-4, "gdn beta: {err}");
        let y0 = rand_tensor(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let err = check_grad(&kt, |t, k| {
            let yv = t.constant(y0.clone());
            let z = t.conv2d_transpose(yv, k, None, 2, 1).unwrap();
            let z = t.abs(z).unwrap();
            let z = t.softplus(z).unwrap();
            t.sum(z).unwrap()
        });
        assert!(err < 1e-4, "transposed kernel: {err}");
    }

    #[test]
    fn rate_and_cosine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y0 = rand_tensor(&[2, 3, 2, 2], &mut rng, -4.0, 4.0);
        let ls0 = rand_tensor(&[3], &mut rng, -0.5, 1.0);
        let err = check_grad(&y0, |t, y| {
            let ls = t.constant(ls0.clone());
            t.logistic_rate(y, ls, 1.0).unwrap()
        });
        assert!(err < 1e-4, "rate wrt y: {err}");
        let err = check_grad(&ls0, |t, ls| {
            let y = t.constant(y0.clone());
            t.logistic_rate(y, ls, 1.0).unwrap()
        });
        assert!(err < 1e-4, "rate wrt scale: {err}");
        let lse = rand_tensor(&[2, 3, 2, 2], &mut rng, -1.0, 1.5);
        let err = check_grad(&lse, |t, ls| {
            let y = t.constant(y0.clone());
            t.logistic_rate(y, ls, 1.0).unwrap()
        });
        assert!(err < 1e-4, "rate wrt per-element scale: {err}");
        let other = rand_tensor(&[2, 3, 2, 2], &mut rng, -1.0, 1.0);
        let err = check_grad(&y0, |t, y| {
            let o = t.constant(other.clone());
            t.cosine(y, o).unwrap()
        });
        assert!(err < 1e-4, "cosine: {err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_tensor(&[1, 3, 16, 16], &mut rng, 0.0, 1.0);
        let k = rand_tensor(&[8, 3, 4, 4], &mut rng, -0.5, 0.5);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let kv = t.constant(k.clone());
            let y = t.conv2d(x, kv, None, 2, 1).unwrap();
            let n = t.norm(y).unwrap();
            t.backward(n, &[x]).unwrap().remove(0)
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
