//! Convolution kernels.
//!
//! The `f64` path lowers convolutions to matrix products (im2col + gemm)
//! and backs the differentiable tape. The `f32` "direct" path is what the
//! compressor runs: plain nested loops with one accumulator per output
//! element, summing in row-major `(c_in, ky, kx)` order starting from the
//! bias, so that bitstreams are reproducible.

use super::{Result, Tensor, TensorError};

/// Spatial geometry of one 2-d convolution (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::Invalid("stride must be positive".into()));
        }
        let ho = out_dim(h, kh, stride, pad)?;
        let wo = out_dim(w, kw, stride, pad)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// `floor((size + 2*pad - k) / stride) + 1`.
pub fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(TensorError::Shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution: `(size-1)*stride - 2*pad + k`.
pub fn transpose_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::Invalid("stride must be positive".into()));
    }
    let full = (size - 1) * stride + k;
    if full <= 2 * pad {
        return Err(TensorError::Shape(format!(
            "transposed conv output would be empty (size {size}, k {k}, pad {pad})"
        )));
    }
    Ok(full - 2 * pad)
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let npix = g.out_pixels();
    debug_assert_eq!(cols.len(), g.patch_len() * npix);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * npix;
                let dst = &mut cols[row..row + npix];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds an im2col matrix back onto an image (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let npix = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * npix;
                let src = &cols[row..row + npix];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n) = op(A) (m x k) * op(B) (k x n)`, row-major, optionally
/// accumulating into `C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds for both layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn check_conv_shapes(
    input: &Tensor,
    kernel: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (c_out, c_in, kh, kw) = kernel.dims4()?;
    if c != c_in {
        return Err(TensorError::Shape(format!(
            "conv input has {c} channels, kernel expects {c_in}"
        )));
    }
    Ok((n, c, h, w, c_out, kh, kw))
}

/// Batched forward convolution. Returns the output and the per-sample
/// im2col matrices (needed for the kernel gradient).
pub(crate) fn conv2d_f64(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom, Vec<f64>)> {
    let (n, c, h, w, c_out, kh, kw) = check_conv_shapes(input, kernel)?;
    let g = ConvGeom::new(c, h, w, c_out, kh, kw, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(TensorError::Shape(format!(
                "bias has {} entries for {c_out} channels",
                b.numel()
            )));
        }
    }
    let per_in = c * h * w;
    let per_out = c_out * g.out_pixels();
    let per_cols = g.patch_len() * g.out_pixels();
    let mut cols = vec![0.0; n * per_cols];
    let mut out = vec![0.0; n * per_out];
    for s in 0..n {
        let cs = &mut cols[s * per_cols..(s + 1) * per_cols];
        im2col(&input.data()[s * per_in..(s + 1) * per_in], &g, cs);
        let os = &mut out[s * per_out..(s + 1) * per_out];
        if let Some(b) = bias {
            for (co, chunk) in os.chunks_mut(g.out_pixels()).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(
            c_out,
            g.patch_len(),
            g.out_pixels(),
            kernel.data(),
            false,
            cs,
            false,
            os,
            bias.is_some(),
        );
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("conv2d"));
    }
    Ok((
        Tensor::from_parts(vec![n, c_out, g.ho, g.wo], out, Default::default()),
        g,
        cols,
    ))
}

/// Geometry of the forward convolution whose adjoint a transposed
/// convolution computes. `kernel` is `(C_from, C_to, kh, kw)`.
pub(crate) fn transpose_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<(usize, ConvGeom)> {
    let (n, c_from, hi, wi) = input.dims4()?;
    let (kc_from, c_to, kh, kw) = kernel.dims4()?;
    if c_from != kc_from {
        return Err(TensorError::Shape(format!(
            "transposed conv input has {c_from} channels, kernel expects {kc_from}"
        )));
    }
    let ho = transpose_out_dim(hi, kh, stride, pad)?;
    let wo = transpose_out_dim(wi, kw, stride, pad)?;
    let g = ConvGeom::new(c_to, ho, wo, c_from, kh, kw, stride, pad)?;
    if g.ho != hi || g.wo != wi {
        return Err(TensorError::Shape("inconsistent transposed geometry".into()));
    }
    Ok((n, g))
}

pub(crate) fn conv2d_transpose_f64(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvGeom)> {
    let (n, g) = transpose_geom(input, kernel, stride, pad)?;
    let c_to = g.c_in;
    if let Some(b) = bias {
        if b.numel() != c_to {
            return Err(TensorError::Shape(format!(
                "bias has {} entries for {c_to} channels",
                b.numel()
            )));
        }
    }
    let per_in = g.c_out * g.out_pixels();
    let per_out = c_to * g.h * g.w;
    let mut cols = vec![0.0; g.patch_len() * g.out_pixels()];
    let mut out = vec![0.0; n * per_out];
    for s in 0..n {
        gemm(
            g.patch_len(),
            g.c_out,
            g.out_pixels(),
            kernel.data(),
            true,
            &input.data()[s * per_in..(s + 1) * per_in],
            false,
            &mut cols,
            false,
        );
        let os = &mut out[s * per_out..(s + 1) * per_out];
        col2im(&cols, &g, os);
        if let Some(b) = bias {
            for (co, chunk) in os.chunks_mut(g.h * g.w).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("conv2d_transpose"));
    }
    Ok((Tensor::from_parts(vec![n, c_to, g.h, g.w], out, Default::default()), g))
}

/// 2-d convolution without bias. `input` is `(N,C,H,W)`, `kernel` is
/// `(C_out,C_in,kh,kw)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_f64(input, kernel, None, stride, padding).map(|(t, _, _)| t)
}

/// Linear adjoint of [`conv2d`] for the same kernel and hyperparameters.
/// `kernel` keeps the forward layout, so a `(C_out,C_in,kh,kw)` kernel maps
/// `C_out` channels back to `C_in`.
pub fn conv2d_transpose(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_transpose_f64(input, kernel, None, stride, padding).map(|(t, _)| t)
}

/// Direct single-precision convolution over one sample `(C,H,W)`.
///
/// `kernel` is `(C_out,C_in,kh,kw)` row-major. Each output starts from its
/// bias and accumulates over `c_in`, then `ky`, then `kx`.
pub fn conv2d_direct_f32(x: &[f32], g: &ConvGeom, kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0f32; g.c_out * g.ho * g.wo];
    for co in 0..g.c_out {
        let kbase = co * g.patch_len();
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut acc = bias[co];
                for ci in 0..g.c_in {
                    for i in 0..g.kh {
                        let ih = (oh * g.stride + i) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let xrow = (ci * g.h + ih as usize) * g.w;
                        let krow = kbase + (ci * g.kh + i) * g.kw;
                        for j in 0..g.kw {
                            let iw = (ow * g.stride + j) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            acc += kernel[krow + j] * x[xrow + iw as usize];
                        }
                    }
                }
                out[(co * g.ho + oh) * g.wo + ow] = acc;
            }
        }
    }
    out
}

/// Direct single-precision transposed convolution over one sample.
///
/// `g` is the geometry of the forward convolution (so `g.c_out`/`g.ho`/`g.wo`
/// describe the input here); `kernel` is `(C_from, C_to, kh, kw)`. Each output
/// pixel gathers its contributions in `(c_from, ky, kx)` order after its bias.
pub fn conv2d_transpose_direct_f32(x: &[f32], g: &ConvGeom, kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let c_to = g.c_in;
    let mut out = vec![0f32; c_to * g.h * g.w];
    for ct in 0..c_to {
        for y in 0..g.h {
            for xx in 0..g.w {
                let mut acc = bias[ct];
                for cf in 0..g.c_out {
                    for i in 0..g.kh {
                        let num = y as isize + g.pad as isize - i as isize;
                        if num < 0 || num % g.stride as isize != 0 {
                            continue;
                        }
                        let iy = (num / g.stride as isize) as usize;
                        if iy >= g.ho {
                            continue;
                        }
                        for j in 0..g.kw {
                            let numx = xx as isize + g.pad as isize - j as isize;
                            if numx < 0 || numx % g.stride as isize != 0 {
                                continue;
                            }
                            let ix = (numx / g.stride as isize) as usize;
                            if ix >= g.wo {
                                continue;
                            }
                            let k = kernel[((cf * c_to + ct) * g.kh + i) * g.kw + j];
                            acc += k * x[(cf * g.ho + iy) * g.wo + ix];
                        }
                    }
                }
                out[(ct * g.h + y) * g.w + xx] = acc;
            }
        }
    }
    out
}
