//! Rate-distortion training with additive uniform noise standing in for
//! quantization.
//!
//! The loss per batch is `bits / pixels + lambda * w * MSE` with MSE on
//! `[0, 1]` pixels and `w = TrainConfig::distortion_weight`. Rates come
//! from zero-mean logistic densities: a learned log-scale per latent channel
//! for factorized models, and per-element log-scales predicted by the hyper
//! synthesis transform for the hyperprior model (whose hyper-latent again
//! uses per-channel scales). GDN parameters are trained through a softplus
//! map (`beta = softplus(r) + 1e-6`, `gamma = softplus(r)`).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::run_tape;
use super::model::CodecModel;
use super::CodecError;
use crate::tensor::tape::softplus;
use crate::tensor::{cosine_annealing_lr, Adam, Tape, Tensor, TensorError, Var};

const BETA_FLOOR: f64 = 1e-6;
const FACTORIZED_SCALE: &str = "entropy.log_scale";
const HYPER_SCALE: &str = "entropy.hyper_log_scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Side of the square random crops used as training samples.
    pub crop: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Multiplies `lambda * MSE`. The default, `255^2 / 20`, places the
    /// lowest preset in the coarse regime where most latent symbols are
    /// zero.
    pub distortion_weight: f64,
}

pub const DEFAULT_DISTORTION_WEIGHT: f64 = 255.0 * 255.0 / 20.0;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            crop: 32,
            lr: 3e-3,
            lr_min: 1e-4,
            seed: 0,
            distortion_weight: DEFAULT_DISTORTION_WEIGHT,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
    pub bpp: Vec<f64>,
    pub mse: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first and the last `window` steps.
    pub fn first_last_loss(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.loss.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.loss[..w.min(self.loss.len())]),
            mean(&self.loss[self.loss.len().saturating_sub(w)..]),
        )
    }
}

fn inverse_softplus(v: f64) -> f64 {
    let v = v.max(1e-12);
    v + (-(-v).exp_m1()).ln()
}

/// Trainable values: conv weights as they are, GDN parameters in softplus
/// space, plus the entropy-model log-scales.
struct RawParams {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl RawParams {
    fn from_model(model: &CodecModel) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for (name, t) in model.params() {
            let raw: Vec<f64> = if name.ends_with(".beta") {
                t.data().iter().map(|&b| inverse_softplus(b - BETA_FLOOR)).collect()
            } else if name.ends_with(".gamma") {
                t.data().iter().map(|&g| inverse_softplus(g)).collect()
            } else {
                t.data().to_vec()
            };
            names.push(name.clone());
            shapes.push(t.shape().to_vec());
            values.push(raw);
        }
        let cfg = model.config();
        names.push(FACTORIZED_SCALE.into());
        shapes.push(vec![cfg.quality.latent_channels]);
        values.push(vec![0.0; cfg.quality.latent_channels]);
        if cfg.arch.has_hyperprior() {
            names.push(HYPER_SCALE.into());
            shapes.push(vec![cfg.hyper_latent]);
            values.push(vec![0.0; cfg.hyper_latent]);
        }
        Self { names, shapes, values }
    }

    /// Leaves for every raw value, and the effective parameters by name.
    fn on_tape(&self, tape: &mut Tape) -> Result<(Vec<Var>, BTreeMap<String, Var>), TensorError> {
        let mut leaves = Vec::new();
        let mut eff = BTreeMap::new();
        for ((name, shape), v) in self.names.iter().zip(&self.shapes).zip(&self.values) {
            let leaf = tape.leaf(Tensor::new(shape, v.clone())?, true);
            leaves.push(leaf);
            let e = if name.ends_with(".beta") {
                let s = tape.softplus(leaf)?;
                tape.affine(s, 1.0, BETA_FLOOR)?
            } else if name.ends_with(".gamma") {
                tape.softplus(leaf)?
            } else {
                leaf
            };
            eff.insert(name.clone(), e);
        }
        Ok((leaves, eff))
    }

    fn effective(&self) -> Result<BTreeMap<String, Tensor>, TensorError> {
        let mut out = BTreeMap::new();
        for ((name, shape), v) in self.names.iter().zip(&self.shapes).zip(&self.values) {
            if name.starts_with("entropy.") {
                continue;
            }
            let data = if name.ends_with(".beta") {
                v.iter().map(|&r| softplus(r) + BETA_FLOOR).collect()
            } else if name.ends_with(".gamma") {
                v.iter().map(|&r| softplus(r)).collect()
            } else {
                v.clone()
            };
            out.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

fn sample_batch(dataset: &[Tensor], batch: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<Tensor, CodecError> {
    let mut items = Vec::with_capacity(batch);
    for _ in 0..batch {
        let img = &dataset[rng.gen_range(0..dataset.len())];
        let (_, c, h, w) = img.dims4()?;
        let oy = rng.gen_range(0..=h - crop);
        let ox = rng.gen_range(0..=w - crop);
        let mut data = Vec::with_capacity(c * crop * crop);
        for ch in 0..c {
            for y in 0..crop {
                let row = (ch * h + oy + y) * w + ox;
                data.extend_from_slice(&img.data()[row..row + crop]);
            }
        }
        items.push(Tensor::new(&[1, c, crop, crop], data)?);
    }
    Ok(Tensor::stack(&items.iter().collect::<Vec<_>>())?)
}

fn uniform_noise(shape: &[usize], step: f64, rng: &mut ChaCha8Rng) -> Result<Tensor, TensorError> {
    Tensor::from_fn(shape, |_| rng.gen_range(-0.5..0.5) * step)
}

/// Trains with default settings for `steps` steps.
pub fn train_rd(
    model: &CodecModel,
    dataset: &[Tensor],
    lambda: f64,
    steps: usize,
    seed: u64,
) -> Result<(CodecModel, TrainReport), CodecError> {
    let cfg = TrainConfig {
        steps,
        seed,
        ..TrainConfig::default()
    };
    train_rd_with(model, dataset, lambda, &cfg)
}

/// Trains a copy of `model`. The returned model has no entropy model; fit
/// one with [`super::fit_prior`].
pub fn train_rd_with(
    model: &CodecModel,
    dataset: &[Tensor],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(CodecModel, TrainReport), CodecError> {
    if dataset.is_empty() {
        return Err(CodecError::BadImage("training set is empty".into()));
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(CodecError::BadModel(
            "training needs at least one step and one sample".into(),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CodecError::BadModel(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let d = model.arch().downsampling();
    if cfg.crop == 0 || cfg.crop % d != 0 {
        return Err(CodecError::BadModel(format!(
            "crop {} is not a multiple of {d}",
            cfg.crop
        )));
    }
    for img in dataset {
        let (h, w) = model.check_image(img)?;
        if h < cfg.crop || w < cfg.crop {
            return Err(CodecError::BadImage(format!(
                "{h}x{w} image smaller than crop {}",
                cfg.crop
            )));
        }
    }
    let mcfg = *model.config();
    let step_q = mcfg.quality.step;
    let analysis = mcfg.analysis_layers();
    let synthesis = mcfg.synthesis_layers();
    let hyper_a = mcfg.hyper_analysis_layers();
    let hyper_s = mcfg.hyper_synthesis_layers();

    let mut raw = RawParams::from_model(model);
    let lens: Vec<usize> = raw.values.iter().map(Vec::len).collect();
    let mut adam = Adam::with_defaults(&lens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let pixels = (cfg.batch * cfg.crop * cfg.crop) as f64;
    let dist_weight = lambda * cfg.distortion_weight;

    for step in 0..cfg.steps {
        let x = sample_batch(dataset, cfg.batch, cfg.crop, &mut rng)?;
        let mut tape = Tape::new();
        let (leaves, p) = raw.on_tape(&mut tape)?;
        let xv = tape.constant(x.clone());
        let y = run_tape(&analysis, &mut tape, &p, xv)?;
        let noise = uniform_noise(tape.value(y).shape(), step_q, &mut rng)?;
        let nv = tape.constant(noise);
        let y_noisy = tape.add(y, nv)?;
        let rate = if mcfg.arch.has_hyperprior() {
            let abs_y = tape.abs(y)?;
            let z = run_tape(&hyper_a, &mut tape, &p, abs_y)?;
            let zn = uniform_noise(tape.value(z).shape(), step_q, &mut rng)?;
            let zn = tape.constant(zn);
            let z_noisy = tape.add(z, zn)?;
            let rate_z = tape.logistic_rate(z_noisy, p[HYPER_SCALE], step_q)?;
            let log_scales = run_tape(&hyper_s, &mut tape, &p, z_noisy)?;
            let rate_y = tape.logistic_rate(y_noisy, log_scales, step_q)?;
            tape.add(rate_z, rate_y)?
        } else {
            tape.logistic_rate(y_noisy, p[FACTORIZED_SCALE], step_q)?
        };
        let x_hat = run_tape(&synthesis, &mut tape, &p, y_noisy)?;
        let diff = tape.sub(x_hat, xv)?;
        let sq = tape.mul(diff, diff)?;
        let sse = tape.sum(sq)?;
        let mse = tape.affine(sse, 1.0 / (pixels * 3.0), 0.0)?;
        let bpp = tape.affine(rate, 1.0 / pixels, 0.0)?;
        let weighted = tape.affine(mse, dist_weight, 0.0)?;
        let loss = tape.add(bpp, weighted)?;

        let loss_v = tape.value(loss).item()?;
        if !loss_v.is_finite() {
            return Err(CodecError::Divergence {
                step,
                detail: format!("loss {loss_v}"),
            });
        }
        report.loss.push(loss_v);
        report.bpp.push(tape.value(bpp).item()?);
        report.mse.push(tape.value(mse).item()?);

        let grads = tape.backward(loss, &leaves).map_err(|e| CodecError::Divergence {
            step,
            detail: e.to_string(),
        })?;
        let lr = cosine_annealing_lr(step, cfg.steps, cfg.lr, cfg.lr_min)?;
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let mut param_refs: Vec<&mut [f64]> = raw.values.iter_mut().map(|v| v.as_mut_slice()).collect();
        adam.step(&mut param_refs, &grad_refs, lr)?;
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!(
                "train {} qf{} step {step}: loss {loss_v:.4} bpp {:.4} mse {:.5}",
                mcfg.arch,
                mcfg.quality.qf,
                report.bpp[step],
                report.mse[step]
            );
        }
    }
    let trained = CodecModel::from_parts(mcfg, raw.effective()?, None)?;
    Ok((trained, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_softplus_inverts() {
        for v in [1e-6, 0.1, 1.0, 7.5] {
            assert!((softplus(inverse_softplus(v)) - v).abs() < 1e-9 * v.max(1.0));
        }
    }
}
