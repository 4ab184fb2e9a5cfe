use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bitstream::{Compressed, Header};
use super::entropy::EntropyModel;
use super::layers::{run_f32, run_tape, run_tape_with, Layer, Map32, KERNEL};
use super::quant::{quantize_value, Symbols};
use super::CodecError;
use crate::tensor::{Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "fp-gdn")]
    FpGdn,
    #[serde(rename = "fp-relu")]
    FpRelu,
    #[serde(rename = "sh")]
    ShToy,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::FpGdn, Architecture::FpRelu, Architecture::ShToy];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::FpGdn => "fp-gdn",
            Architecture::FpRelu => "fp-relu",
            Architecture::ShToy => "sh",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Architecture::FpGdn => 1,
            Architecture::FpRelu => 2,
            Architecture::ShToy => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }

    pub fn has_hyperprior(self) -> bool {
        self == Architecture::ShToy
    }

    /// Height and width of inputs must be multiples of this.
    pub fn downsampling(self) -> usize {
        if self.has_hyperprior() {
            16
        } else {
            8
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| CodecError::BadModel(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityPreset {
    pub qf: u8,
    pub lambda: f64,
    pub latent_channels: usize,
    pub step: f64,
}

impl QualityPreset {
    pub const LADDER_LEN: u8 = 5;

    /// The five presets, lowest quality first.
    pub fn ladder() -> Vec<QualityPreset> {
        let lambdas = [0.001, 0.003, 0.01, 0.03, 0.1];
        let channels = [8, 16, 32, 48, 64];
        (0..5)
            .map(|i| QualityPreset {
                qf: i as u8 + 1,
                lambda: lambdas[i],
                latent_channels: channels[i],
                step: 1.0,
            })
            .collect()
    }

    pub fn for_qf(qf: u8) -> Result<Self, CodecError> {
        Self::ladder()
            .into_iter()
            .find(|p| p.qf == qf)
            .ok_or_else(|| CodecError::BadModel(format!("no preset for QF {qf}")))
    }
}

/// Everything that fixes the parameter shapes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub quality: QualityPreset,
    pub hidden: usize,
    pub hyper_hidden: usize,
    pub hyper_latent: usize,
}

impl ModelConfig {
    pub fn new(arch: Architecture, qf: u8) -> Result<Self, CodecError> {
        let quality = QualityPreset::for_qf(qf)?;
        Ok(Self {
            arch,
            quality,
            hidden: 16,
            hyper_hidden: 16,
            hyper_latent: (quality.latent_channels / 2).max(4),
        })
    }

    pub fn analysis_layers(&self) -> Vec<Layer> {
        let nl = |i: usize| match self.arch {
            Architecture::FpRelu => Layer::Relu,
            _ => Layer::gdn(format!("g_a.{i}"), false),
        };
        vec![
            Layer::conv("g_a.0", KERNEL, 2, 1),
            nl(1),
            Layer::conv("g_a.2", KERNEL, 2, 1),
            nl(3),
            Layer::conv("g_a.4", KERNEL, 2, 1),
        ]
    }

    pub fn synthesis_layers(&self) -> Vec<Layer> {
        let nl = |i: usize| match self.arch {
            Architecture::FpRelu => Layer::Relu,
            _ => Layer::gdn(format!("g_s.{i}"), true),
        };
        vec![
            Layer::conv_t("g_s.0", KERNEL, 2, 1),
            nl(1),
            Layer::conv_t("g_s.2", KERNEL, 2, 1),
            nl(3),
            Layer::conv_t("g_s.4", KERNEL, 2, 1),
        ]
    }

    /// Hyper analysis; its input is `|y|`.
    pub fn hyper_analysis_layers(&self) -> Vec<Layer> {
        vec![
            Layer::conv("h_a.0", 3, 1, 1),
            Layer::Relu,
            Layer::conv("h_a.2", KERNEL, 2, 1),
        ]
    }

    /// Hyper synthesis; its output is a per-element log-scale for `y`.
    pub fn hyper_synthesis_layers(&self) -> Vec<Layer> {
        vec![
            Layer::conv_t("h_s.0", KERNEL, 2, 1),
            Layer::Relu,
            Layer::conv("h_s.2", 3, 1, 1),
        ]
    }

    /// Name and shape of every parameter tensor.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (n, c) = (self.hidden, self.quality.latent_channels);
        let (nh, ch) = (self.hyper_hidden, self.hyper_latent);
        let k = KERNEL;
        let mut out = Vec::new();
        let mut conv = |name: &str, shape: [usize; 4], bias: usize| {
            out.push((format!("{name}.weight"), shape.to_vec()));
            out.push((format!("{name}.bias"), vec![bias]));
        };
        conv("g_a.0", [n, 3, k, k], n);
        conv("g_a.2", [n, n, k, k], n);
        conv("g_a.4", [c, n, k, k], c);
        conv("g_s.0", [c, n, k, k], n);
        conv("g_s.2", [n, n, k, k], n);
        conv("g_s.4", [n, 3, k, k], 3);
        if self.arch.has_hyperprior() {
            conv("h_a.0", [nh, c, 3, 3], nh);
            conv("h_a.2", [ch, nh, k, k], ch);
            conv("h_s.0", [ch, nh, k, k], nh);
            conv("h_s.2", [c, nh, 3, 3], c);
        }
        if self.arch != Architecture::FpRelu {
            for name in ["g_a.1", "g_a.3", "g_s.1", "g_s.3"] {
                out.push((format!("{name}.beta"), vec![n]));
                out.push((format!("{name}.gamma"), vec![n, n]));
            }
        }
        out
    }

    /// Channels of the tensor the entropy model codes first.
    pub fn coded_latent_channels(&self) -> usize {
        self.quality.latent_channels
    }
}

/// Numeric variations of the compression path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrecisionPlan {
    /// Round every analysis-side layer output to half precision.
    pub round_activations_f16: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    entropy: Option<EntropyModel>,
}

/// Quantized latents of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSymbols {
    pub y: Symbols,
    pub hyper: Option<Symbols>,
}

impl CodecModel {
    /// Builds a model from named parameters. Every parameter must be present
    /// with its expected shape, GDN betas strictly positive and gammas
    /// non-negative. Values are rounded to single precision.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        entropy: Option<EntropyModel>,
    ) -> Result<Self, CodecError> {
        let shapes = config.parameter_shapes();
        if params.len() != shapes.len() {
            return Err(CodecError::BadModel(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        let mut rounded = BTreeMap::new();
        for (name, shape) in shapes {
            let t = params
                .get(&name)
                .ok_or_else(|| CodecError::BadModel(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(CodecError::BadModel(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            let t = t.to_precision(Precision::F32);
            if name.ends_with(".beta") && t.data().iter().any(|&b| b <= 0.0) {
                return Err(CodecError::BadModel(format!("{name} must be strictly positive")));
            }
            if name.ends_with(".gamma") && t.data().iter().any(|&g| g < 0.0) {
                return Err(CodecError::BadModel(format!("{name} must be non-negative")));
            }
            rounded.insert(name, t);
        }
        if let Some(e) = &entropy {
            e.check_compatible(&config)?;
        }
        Ok(Self {
            config,
            params: rounded,
            entropy,
        })
    }

    /// Randomly initialized model (no entropy model yet).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, CodecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".weight") {
                let fan_in = shape[1] * shape[2] * shape[3];
                let fan_out = shape[0] * shape[2] * shape[3];
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            } else if name.ends_with(".beta") {
                vec![1.0; n]
            } else if name.ends_with(".gamma") {
                let c = shape[0];
                (0..n).map(|i| if i / c == i % c { 0.1 } else { 1e-3 }).collect()
            } else {
                vec![0.0; n]
            };
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Self::from_parts(config, params, None)
    }

    /// All convolution weights and biases zero, GDN with `beta = 1` and
    /// `gamma = 0`.
    pub fn zeroed(config: ModelConfig) -> Result<Self, CodecError> {
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with(".beta") { 1.0 } else { 0.0 };
                let t = Tensor::full(&shape, fill);
                (name, t)
            })
            .collect();
        Self::from_parts(config, params, None)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    pub fn quality(&self) -> &QualityPreset {
        &self.config.quality
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn entropy(&self) -> Option<&EntropyModel> {
        self.entropy.as_ref()
    }

    pub fn with_entropy(mut self, entropy: EntropyModel) -> Result<Self, CodecError> {
        entropy.check_compatible(&self.config)?;
        self.entropy = Some(entropy);
        Ok(self)
    }

    /// Copy with every parameter rounded to half precision.
    pub fn with_f16_weights(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let mut t = v.to_precision(Precision::F16);
                if k.ends_with(".beta") {
                    // Keep the divisor strictly positive.
                    t = t.map(|b| b.max(crate::tensor::half::F16_MIN_POSITIVE)).expect("finite");
                }
                (k.clone(), t)
            })
            .collect();
        Self {
            config: self.config,
            params,
            entropy: self.entropy.clone(),
        }
    }

    fn params_f32(&self) -> BTreeMap<String, Vec<f32>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.data().iter().map(|&d| d as f32).collect()))
            .collect()
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn param_constants(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Checks shape and pixel range of an input image.
    pub fn check_image(&self, image: &Tensor) -> Result<(usize, usize), CodecError> {
        let (n, c, h, w) = image.dims4().map_err(|e| CodecError::BadImage(e.to_string()))?;
        let d = self.config.arch.downsampling();
        if n != 1 || c != 3 {
            return Err(CodecError::BadImage(format!(
                "expected shape (1,3,H,W), got {:?}",
                image.shape()
            )));
        }
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(CodecError::BadImage(format!("{h}x{w} is not a multiple of {d}")));
        }
        if h > usize::from(u16::MAX) || w > usize::from(u16::MAX) {
            return Err(CodecError::BadImage(format!("{h}x{w} exceeds the container limit")));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CodecError::BadImage("pixel values must lie in [0, 1]".into()));
        }
        Ok((h, w))
    }

    /// Differentiable analysis transform on a tape, parameters held constant.
    pub fn analysis_tape(&self, tape: &mut Tape, x: Var) -> Result<Var, CodecError> {
        let params = self.param_constants(tape);
        Ok(run_tape(&self.config.analysis_layers(), tape, &params, x)?)
    }

    /// Analysis transform on a tape with every layer output rounded to half
    /// precision (straight-through gradients).
    pub fn analysis_tape_f16(&self, tape: &mut Tape, x: Var) -> Result<Var, CodecError> {
        let params = self.param_constants(tape);
        Ok(run_tape_with(&self.config.analysis_layers(), tape, &params, x, true)?)
    }

    /// Differentiable synthesis transform on a tape, parameters held constant.
    pub fn synthesis_tape(&self, tape: &mut Tape, y: Var) -> Result<Var, CodecError> {
        let params = self.param_constants(tape);
        Ok(run_tape(&self.config.synthesis_layers(), tape, &params, y)?)
    }

    /// Latent `f(x)` evaluated at `f64` without rounding to single precision.
    pub fn encode_latent_f64(&self, image: &Tensor) -> Result<Tensor, CodecError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.analysis_tape(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    fn analysis_f32(&self, image: &Tensor, plan: PrecisionPlan) -> Result<Map32, CodecError> {
        self.check_image(image)?;
        let p = self.params_f32();
        Ok(run_f32(
            &self.config.analysis_layers(),
            &p,
            Map32::from_tensor(image)?,
            plan.round_activations_f16,
        )?)
    }

    /// Quantized latents produced by the compression path.
    pub fn latent_symbols(&self, image: &Tensor, plan: PrecisionPlan) -> Result<LatentSymbols, CodecError> {
        let y = self.analysis_f32(image, plan)?;
        let step = self.config.quality.step;
        let quant = |m: &Map32| -> Result<Symbols, CodecError> {
            let v = m
                .data
                .iter()
                .map(|&v| quantize_value(f64::from(v), step))
                .collect::<Result<Vec<_>, _>>()?;
            Symbols::new(vec![1, m.c, m.h, m.w], v)
        };
        let hyper = if self.config.arch.has_hyperprior() {
            let p = self.params_f32();
            let abs_y = Map32 {
                data: y.data.iter().map(|v| v.abs()).collect(),
                ..y.clone()
            };
            let z = run_f32(
                &self.config.hyper_analysis_layers(),
                &p,
                abs_y,
                plan.round_activations_f16,
            )?;
            Some(quant(&z)?)
        } else {
            None
        };
        Ok(LatentSymbols { y: quant(&y)?, hyper })
    }

    /// Per-element log-scales for `y` given quantized hyper-latents.
    pub(crate) fn hyper_log_scales(&self, hyper: &Symbols) -> Result<Vec<f32>, CodecError> {
        let [_, c, h, w] = *hyper.shape() else {
            return Err(CodecError::Corrupt("hyper-latent must be 4-d".into()));
        };
        let step = self.config.quality.step;
        let m = Map32 {
            c,
            h,
            w,
            data: hyper.values().iter().map(|&s| (f64::from(s) * step) as f32).collect(),
        };
        let out = run_f32(&self.config.hyper_synthesis_layers(), &self.params_f32(), m, false)?;
        Ok(out.data)
    }

    /// Synthesis transform on dequantized symbols, clamped to `[0, 1]`.
    pub fn reconstruct(&self, y: &Symbols) -> Result<Tensor, CodecError> {
        let [_, c, h, w] = *y.shape() else {
            return Err(CodecError::Corrupt("latent must be 4-d".into()));
        };
        let step = self.config.quality.step;
        let m = Map32 {
            c,
            h,
            w,
            data: y.values().iter().map(|&s| (f64::from(s) * step) as f32).collect(),
        };
        let out = run_f32(&self.config.synthesis_layers(), &self.params_f32(), m, false)?;
        let data = out.data.iter().map(|&v| f64::from(v).clamp(0.0, 1.0)).collect();
        Ok(Tensor::from_parts(vec![1, out.c, out.h, out.w], data, Precision::F32))
    }

    /// Compression with an optional precision plan (used by the defense).
    pub fn compress_with(&self, image: &Tensor, plan: PrecisionPlan) -> Result<Compressed, CodecError> {
        let entropy = self.entropy.as_ref().ok_or(CodecError::PriorNotFitted)?;
        let (h, w) = self.check_image(image)?;
        let symbols = self.latent_symbols(image, plan)?;
        let payload = entropy.encode(self, &symbols)?;
        Ok(Compressed {
            header: Header {
                qf: self.config.quality.qf,
                height: h as u16,
                width: w as u16,
            },
            payload,
        })
    }

    pub fn decompress_symbols(&self, c: &Compressed) -> Result<LatentSymbols, CodecError> {
        let entropy = self.entropy.as_ref().ok_or(CodecError::PriorNotFitted)?;
        if c.header.qf != self.config.quality.qf {
            return Err(CodecError::Corrupt(format!(
                "stream has QF {}, model has QF {}",
                c.header.qf, self.config.quality.qf
            )));
        }
        let (h, w) = (usize::from(c.header.height), usize::from(c.header.width));
        let d = self.config.arch.downsampling();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(CodecError::Corrupt(format!(
                "header size {h}x{w} is not a multiple of {d}"
            )));
        }
        entropy.decode(self, &c.payload, h, w)
    }
}

/// Continuous latent `f(x)` from the compression path (single precision,
/// fixed summation order).
pub fn encode_latent(model: &CodecModel, image: &Tensor) -> Result<Tensor, CodecError> {
    Ok(model.analysis_f32(image, PrecisionPlan::default())?.to_tensor())
}

pub fn compress(model: &CodecModel, image: &Tensor) -> Result<Compressed, CodecError> {
    model.compress_with(image, PrecisionPlan::default())
}

pub fn decompress(model: &CodecModel, c: &Compressed) -> Result<Tensor, CodecError> {
    let symbols = model.decompress_symbols(c)?;
    model.reconstruct(&symbols.y)
}
