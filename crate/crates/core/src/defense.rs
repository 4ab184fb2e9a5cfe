//! Limited-precision defense: half-precision truncation inside the
//! compression path, and the harness that attacks a defended pipeline.

use serde::{Deserialize, Serialize};

use crate::attack::{mgd_attack, AttackConfig, AttackError};
use crate::codec::{decompress, CodecError, CodecModel, Compressed, PrecisionPlan};
use crate::metrics::{psnr, MetricReport};
use crate::tensor::{Precision, Tensor};

/// Which tensors are truncated to half precision. The default truncates the
/// analysis activations only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LpdPolicy {
    pub latent: bool,
    pub weights: bool,
}

impl Default for LpdPolicy {
    fn default() -> Self {
        Self {
            latent: true,
            weights: false,
        }
    }
}

impl LpdPolicy {
    pub const INACTIVE: LpdPolicy = LpdPolicy {
        latent: false,
        weights: false,
    };

    pub fn is_active(&self) -> bool {
        self.latent || self.weights
    }

    pub fn plan(&self) -> PrecisionPlan {
        PrecisionPlan {
            round_activations_f16: self.latent,
        }
    }
}

/// Nearest half-precision value of every element (ties to even, saturating
/// at the largest finite half value), returned at working precision.
pub fn truncate_f16(t: &Tensor) -> Tensor {
    t.to_precision(Precision::F16).to_precision(Precision::F64)
}

/// A compression pipeline as deployed: a model plus the precision policy
/// applied to it. With an inactive policy this is plain `compress`.
#[derive(Debug, Clone)]
pub struct Pipeline {
    model: CodecModel,
    plan: PrecisionPlan,
}

impl Pipeline {
    pub fn new(model: &CodecModel, policy: LpdPolicy) -> Self {
        let model = if policy.weights {
            model.with_f16_weights()
        } else {
            model.clone()
        };
        Self {
            model,
            plan: policy.plan(),
        }
    }

    /// The model actually run, with truncated weights when the policy asks.
    pub fn model(&self) -> &CodecModel {
        &self.model
    }

    pub fn compress(&self, image: &Tensor) -> Result<Compressed, CodecError> {
        self.model.compress_with(image, self.plan)
    }

    /// Like [`Pipeline::compress`], but a latent outside the prior's range
    /// yields `None`: such an image cannot collide with anything.
    pub fn try_compress(&self, image: &Tensor) -> Result<Option<Compressed>, CodecError> {
        match self.compress(image) {
            Ok(c) => Ok(Some(c)),
            Err(CodecError::SymbolOutOfRange { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn decompress(&self, c: &Compressed) -> Result<Tensor, CodecError> {
        decompress(&self.model, c)
    }
}

/// `compress` with the policy's truncations applied.
pub fn compress_lpd(model: &CodecModel, image: &Tensor, policy: LpdPolicy) -> Result<Compressed, CodecError> {
    Pipeline::new(model, policy).compress(image)
}

/// Mean reconstruction PSNR of ordinary images with and without the policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityGap {
    pub psnr_plain: f64,
    pub psnr_defended: f64,
}

impl QualityGap {
    pub fn degradation_db(&self) -> f64 {
        self.psnr_plain - self.psnr_defended
    }
}

pub fn quality_gap(model: &CodecModel, images: &[Tensor], policy: LpdPolicy) -> Result<QualityGap, AttackError> {
    if images.is_empty() {
        return Err(AttackError::Config("no images to measure".into()));
    }
    let plain = Pipeline::new(model, LpdPolicy::INACTIVE);
    let defended = Pipeline::new(model, policy);
    let (mut a, mut b) = (0.0, 0.0);
    for img in images {
        a += psnr(img, &plain.decompress(&plain.compress(img)?)?)?;
        b += psnr(img, &defended.decompress(&defended.compress(img)?)?)?;
    }
    let n = images.len() as f64;
    Ok(QualityGap {
        psnr_plain: a / n,
        psnr_defended: b / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub policy: LpdPolicy,
    pub undefended: MetricReport,
    pub defended: MetricReport,
}

/// Runs MGD on every pair twice: against the plain pipeline and against the
/// pipeline under `policy` (the attacker's collision check then uses the
/// defended compression). With an inactive policy both reports coincide.
pub fn evaluate_defense(
    model: &CodecModel,
    pairs: &[(Tensor, Tensor)],
    config: &AttackConfig,
    policy: LpdPolicy,
) -> Result<DefenseReport, AttackError> {
    if pairs.is_empty() {
        return Err(AttackError::Config("empty pair suite".into()));
    }
    let mut plain = Vec::with_capacity(pairs.len());
    let mut defended = Vec::with_capacity(pairs.len());
    let plain_cfg = AttackConfig {
        lpd: None,
        ..config.clone()
    };
    let defended_cfg = AttackConfig {
        lpd: Some(policy),
        ..config.clone()
    };
    for (i, (src, tgt)) in pairs.iter().enumerate() {
        let run = mgd_attack(model, src, tgt, &plain_cfg)?;
        plain.push(run.record(i));
        if policy.is_active() {
            defended.push(mgd_attack(model, src, tgt, &defended_cfg)?.record(i));
        }
    }
    let undefended = MetricReport::new(plain)?;
    let defended = if policy.is_active() {
        MetricReport::new(defended)?
    } else {
        undefended.clone()
    };
    Ok(DefenseReport {
        policy,
        undefended,
        defended,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{fit_prior, Architecture, ModelConfig};
    use crate::experiments::data::{synthetic_dataset, Synthetic};

    #[test]
    fn truncation_examples() {
        let t = Tensor::new(&[5], vec![0.0, 1.0, 1.0 + 2f64.powi(-10), 1.0 + 2f64.powi(-11), 1e6]).unwrap();
        let r = truncate_f16(&t);
        assert_eq!(r.data(), &[0.0, 1.0, 1.0009765625, 1.0, 65504.0]);
        assert_eq!(truncate_f16(&r), r);
    }

    #[test]
    fn defended_compression_is_deterministic() {
        let model = CodecModel::init(ModelConfig::new(Architecture::FpGdn, 1).unwrap(), 3).unwrap();
        let data = synthetic_dataset(Synthetic::Scenes, 4, 32, 1);
        let model = model.clone().with_entropy(fit_prior(&model, &data).unwrap()).unwrap();
        for policy in [
            LpdPolicy::default(),
            LpdPolicy {
                latent: true,
                weights: true,
            },
        ] {
            let a = compress_lpd(&model, &data[0], policy).unwrap();
            assert_eq!(a, compress_lpd(&model, &data[0], policy).unwrap());
        }
        assert_eq!(
            compress_lpd(&model, &data[1], LpdPolicy::INACTIVE).unwrap(),
            crate::codec::compress(&model, &data[1]).unwrap()
        );
    }
}
