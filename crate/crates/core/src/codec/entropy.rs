//! Entropy models attached to a trained codec.
//!
//! Factorized models code the latent with one static table per channel.
//! The hyperprior model first codes the hyper-latent with a factorized
//! table set, then codes each latent element with the table of the scale
//! level its decoded log-scale falls into. Scale levels are selected by
//! comparing the log-scale against fixed `f32` thresholds, so no
//! transcendental function is evaluated while coding.

use serde::{Deserialize, Serialize};

use super::bitstream::Bitstream;
use super::model::{CodecModel, LatentSymbols, ModelConfig, PrecisionPlan};
use super::prior::{ChannelTable, FactorizedPrior};
use super::quant::Symbols;
use super::rangecoder::{RangeDecoder, RangeEncoder, TOTAL};
use super::CodecError;
use crate::tensor::Tensor;

/// Number of scale levels in [`ScaleTables`].
pub const SCALE_LEVELS: usize = 32;
const LOG_SCALE_MIN: f64 = -3.0;
const LOG_SCALE_MAX: f64 = 4.0;

impl ChannelTable {
    /// Integer table from probabilities, each frequency at least 1, the
    /// rounding residue given to the most probable symbol.
    pub fn from_probabilities(s_min: i32, probs: &[f64]) -> Result<Self, CodecError> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || !(total > 0.0) {
            return Err(CodecError::Prior("empty probability table".into()));
        }
        let mut freqs: Vec<u32> = probs
            .iter()
            .map(|&p| ((p / total) * f64::from(TOTAL)).round().max(1.0) as u32)
            .collect();
        let sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
        let top = (0..freqs.len()).fold(0, |b, i| if freqs[i] > freqs[b] { i } else { b });
        let adjusted = i64::from(freqs[top]) + i64::from(TOTAL) - sum;
        if adjusted < 1 {
            return Err(CodecError::Prior("too many symbols for the table precision".into()));
        }
        freqs[top] = adjusted as u32;
        Self::new(s_min, freqs)
    }
}

/// Tables for a zero-mean logistic latent at [`SCALE_LEVELS`] scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleTables {
    thresholds: Vec<f32>,
    tables: Vec<ChannelTable>,
}

impl ScaleTables {
    pub fn new(thresholds: Vec<f32>, tables: Vec<ChannelTable>) -> Result<Self, CodecError> {
        if tables.is_empty() || thresholds.len() + 1 != tables.len() {
            return Err(CodecError::Prior(
                "scale tables need one more table than thresholds".into(),
            ));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CodecError::Prior("scale thresholds must increase".into()));
        }
        Ok(Self { thresholds, tables })
    }

    /// Discretized logistic tables over symbols `[-radius, radius]` at
    /// log-spaced scales. Tail mass outside the range is folded into the
    /// two edge symbols.
    pub fn logistic(step: f64, radius: i32) -> Result<Self, CodecError> {
        let delta = (LOG_SCALE_MAX - LOG_SCALE_MIN) / (SCALE_LEVELS - 1) as f64;
        let levels: Vec<f64> = (0..SCALE_LEVELS).map(|k| LOG_SCALE_MIN + k as f64 * delta).collect();
        let thresholds = levels.windows(2).map(|w| ((w[0] + w[1]) / 2.0) as f32).collect();
        let cdf = |v: f64, a: f64| 1.0 / (1.0 + (-v / a).exp());
        let tables = levels
            .iter()
            .map(|&la| {
                let a = la.exp();
                let probs: Vec<f64> = (-radius..=radius)
                    .map(|s| {
                        let hi = if s == radius {
                            1.0
                        } else {
                            cdf((f64::from(s) + 0.5) * step, a)
                        };
                        let lo = if s == -radius {
                            0.0
                        } else {
                            cdf((f64::from(s) - 0.5) * step, a)
                        };
                        (hi - lo).max(0.0)
                    })
                    .collect();
                ChannelTable::from_probabilities(-radius, &probs)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(thresholds, tables)
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn tables(&self) -> &[ChannelTable] {
        &self.tables
    }

    pub fn level(&self, log_scale: f32) -> usize {
        self.thresholds.partition_point(|&t| t <= log_scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EntropyModel {
    Factorized(FactorizedPrior),
    Hyper {
        hyper: FactorizedPrior,
        scales: ScaleTables,
    },
}

impl EntropyModel {
    pub(crate) fn check_compatible(&self, config: &ModelConfig) -> Result<(), CodecError> {
        match (self, config.arch.has_hyperprior()) {
            (EntropyModel::Factorized(p), false) if p.num_channels() == config.quality.latent_channels => Ok(()),
            (EntropyModel::Hyper { hyper, .. }, true) if hyper.num_channels() == config.hyper_latent => Ok(()),
            _ => Err(CodecError::BadModel(
                "entropy model does not match the architecture or channel count".into(),
            )),
        }
    }

    pub(crate) fn encode(&self, model: &CodecModel, s: &LatentSymbols) -> Result<Bitstream, CodecError> {
        let mut enc = RangeEncoder::new();
        match (self, &s.hyper) {
            (EntropyModel::Factorized(p), None) => p.encode_into(&mut enc, &s.y)?,
            (EntropyModel::Hyper { hyper, scales }, Some(z)) => {
                hyper.encode_into(&mut enc, z)?;
                let log_scales = model.hyper_log_scales(z)?;
                if log_scales.len() != s.y.values().len() {
                    return Err(CodecError::BadModel(
                        "hyper synthesis output does not match the latent".into(),
                    ));
                }
                for (&v, &ls) in s.y.values().iter().zip(&log_scales) {
                    let level = scales.level(ls);
                    let t = &scales.tables[level];
                    if v < t.s_min() || v > t.s_max() {
                        return Err(CodecError::SymbolOutOfRange {
                            symbol: v,
                            channel: level,
                            min: t.s_min(),
                            max: t.s_max(),
                        });
                    }
                    let k = (v - t.s_min()) as usize;
                    enc.encode(t.cdf()[k], t.freqs()[k]);
                }
            }
            _ => return Err(CodecError::BadModel("symbols do not match the entropy model".into())),
        }
        Ok(enc.finish())
    }

    pub(crate) fn decode(
        &self,
        model: &CodecModel,
        b: &Bitstream,
        h: usize,
        w: usize,
    ) -> Result<LatentSymbols, CodecError> {
        let cfg = model.config();
        let c = cfg.quality.latent_channels;
        let (yh, yw) = (h / 8, w / 8);
        let mut dec = RangeDecoder::new(b.bytes());
        let out = match self {
            EntropyModel::Factorized(p) => {
                let v = p.decode_from(&mut dec, c * yh * yw)?;
                LatentSymbols {
                    y: Symbols::new(vec![1, c, yh, yw], v)?,
                    hyper: None,
                }
            }
            EntropyModel::Hyper { hyper, scales } => {
                let shape = vec![1, cfg.hyper_latent, yh / 2, yw / 2];
                let zv = hyper.decode_from(&mut dec, shape.iter().product())?;
                let z = Symbols::new(shape, zv)?;
                let log_scales = model.hyper_log_scales(&z)?;
                let mut v = Vec::with_capacity(log_scales.len());
                for &ls in &log_scales {
                    let t = &scales.tables[scales.level(ls)];
                    let at = dec.peek()?;
                    let k = t.cdf().partition_point(|&x| x <= at) - 1;
                    dec.consume(t.cdf()[k], t.freqs()[k])?;
                    v.push(t.s_min() + k as i32);
                }
                LatentSymbols {
                    y: Symbols::new(vec![1, c, yh, yw], v)?,
                    hyper: Some(z),
                }
            }
        };
        if dec.consumed() < b.bytes().len() {
            return Err(CodecError::Corrupt("unused bytes after the last symbol".into()));
        }
        Ok(out)
    }

    /// Ideal code length of the factorized part, for diagnostics.
    pub fn factorized(&self) -> &FactorizedPrior {
        match self {
            EntropyModel::Factorized(p) => p,
            EntropyModel::Hyper { hyper, .. } => hyper,
        }
    }
}

/// Symbol margin added on both sides of the observed range.
pub const PRIOR_MARGIN: i32 = 2;

/// Fits the entropy model of `model` to the quantized latents of `dataset`.
pub fn fit_prior(model: &CodecModel, dataset: &[Tensor]) -> Result<EntropyModel, CodecError> {
    if dataset.is_empty() {
        return Err(CodecError::Prior("cannot fit a prior to an empty dataset".into()));
    }
    let symbols = dataset
        .iter()
        .map(|x| model.latent_symbols(x, PrecisionPlan::default()))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = model.config();
    if cfg.arch.has_hyperprior() {
        let hyper: Vec<Symbols> = symbols.iter().filter_map(|s| s.hyper.clone()).collect();
        let hyper = FactorizedPrior::fit(&hyper, cfg.hyper_latent, PRIOR_MARGIN)?;
        let radius = symbols
            .iter()
            .flat_map(|s| s.y.values().iter().map(|v| v.abs()))
            .max()
            .unwrap_or(0)
            + PRIOR_MARGIN;
        let scales = ScaleTables::logistic(cfg.quality.step, radius)?;
        Ok(EntropyModel::Hyper { hyper, scales })
    } else {
        let ys: Vec<Symbols> = symbols.into_iter().map(|s| s.y).collect();
        Ok(EntropyModel::Factorized(FactorizedPrior::fit(
            &ys,
            cfg.quality.latent_channels,
            PRIOR_MARGIN,
        )?))
    }
}
