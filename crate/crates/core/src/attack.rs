//! Collision attacks: masked gradient descent (MGD) with a dot-grid mask,
//! plus PGD and Carlini-Wagner style baselines. All three minimise the
//! distance between the latent of the iterate and the latent of the target.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, CodecModel, Compressed};
use crate::defense::{LpdPolicy, Pipeline};
use crate::imageio::{self, ImageError};
use crate::metrics::{hamming_normalized, l2_per_pixel, ms_ssim, MetricError, PairRecord};
use crate::tensor::{cosine_annealing_lr, Adam, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("transfer check needs a collided run")]
    NotCollided,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dot grid: pixel `(h, w)` may change iff `(h - h0) % delta_h == 0` and
/// `(w - w0) % delta_w == 0`. Rows and columns are independent progressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub delta_h: usize,
    pub delta_w: usize,
    pub h0: usize,
    pub w0: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            delta_h: 3,
            delta_w: 1,
            h0: 0,
            w0: 0,
        }
    }
}

impl MaskSpec {
    pub const FULL: MaskSpec = MaskSpec {
        delta_h: 1,
        delta_w: 1,
        h0: 0,
        w0: 0,
    };

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.delta_h == 0 || self.delta_w == 0 {
            return Err(AttackError::Config("mask spacing must be at least 1".into()));
        }
        if self.h0 >= self.delta_h || self.w0 >= self.delta_w {
            return Err(AttackError::Config(
                "mask offsets must be smaller than the spacing".into(),
            ));
        }
        Ok(())
    }

    pub fn allows(&self, h: usize, w: usize) -> bool {
        h >= self.h0 && w >= self.w0 && (h - self.h0) % self.delta_h == 0 && (w - self.w0) % self.delta_w == 0
    }

    /// Fraction of the `h`x`w` pixels the mask lets through.
    pub fn density(&self, h: usize, w: usize) -> f64 {
        let rows = (h.saturating_sub(self.h0)).div_ceil(self.delta_h);
        let cols = (w.saturating_sub(self.w0)).div_ceil(self.delta_w);
        (rows * cols) as f64 / (h * w) as f64
    }

    /// Per-element flags for a `(1, C, H, W)` tensor.
    fn flags(&self, c: usize, h: usize, w: usize) -> Vec<bool> {
        let plane: Vec<bool> = (0..h * w).map(|i| self.allows(i / w, i % w)).collect();
        plane.iter().copied().cycle().take(c * h * w).collect()
    }
}

/// Zeroes `grad` outside the mask grid, in every channel.
pub fn apply_dot_mask(grad: &Tensor, mask: &MaskSpec) -> Result<Tensor, AttackError> {
    mask.validate()?;
    let (n, c, h, w) = grad.dims4()?;
    if n != 1 {
        return Err(AttackError::Config(format!("mask expects one sample, got {n}")));
    }
    let flags = mask.flags(c, h, w);
    let data = grad
        .data()
        .iter()
        .zip(&flags)
        .map(|(&g, &ok)| if ok { g } else { 0.0 })
        .collect();
    Ok(Tensor::new(grad.shape(), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// `||f(x) - f(x_tgt)||`.
    LatentL2,
    /// The L2 term plus `(1 - cos) / 2`.
    LatentL2Cosine,
}

/// What the cosine term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineSpace {
    /// `cos(f(x), f(x_tgt))`.
    Latent,
    /// `cos(x, x_tgt)` on pixels.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub max_iterations: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub loss: LossVariant,
    pub cosine_space: CosineSpace,
    pub mask: MaskSpec,
    /// Collision check cadence in iterations; the last iteration is always
    /// checked.
    pub check_every: usize,
    /// Recorded with every run. The attacks themselves are deterministic.
    pub seed: u64,
    /// When set, collisions are judged by the defended pipeline.
    pub lpd: Option<LpdPolicy>,
    /// Backpropagate through the half-precision rounding of the defended
    /// pipeline (straight-through) instead of the full-precision path.
    pub lpd_aware: bool,
    pub pgd_epsilon: f64,
    pub cw_c: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            lr_initial: 0.03,
            lr_min: 0.0,
            loss: LossVariant::LatentL2Cosine,
            cosine_space: CosineSpace::Latent,
            mask: MaskSpec::default(),
            check_every: 25,
            seed: 0,
            lpd: None,
            lpd_aware: false,
            pgd_epsilon: 0.1,
            cw_c: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.max_iterations == 0 {
            return Err(AttackError::Config("max_iterations must be at least 1".into()));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_initial {
            return Err(AttackError::Config(
                "need 0 <= lr_min <= lr_initial and lr_initial > 0".into(),
            ));
        }
        if self.check_every == 0 {
            return Err(AttackError::Config("check_every must be at least 1".into()));
        }
        if let Some(p) = self.lpd {
            if !p.is_active() {
                return Err(AttackError::Config(
                    "lpd policy must truncate latents or weights".into(),
                ));
            }
        }
        self.mask.validate()
    }

    pub fn from_json(s: &str) -> Result<Self, AttackError> {
        let c: Self = serde_json::from_str(s).map_err(|e| AttackError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn lr(&self, iteration: usize) -> Result<f64, AttackError> {
        Ok(cosine_annealing_lr(
            iteration,
            self.max_iterations,
            self.lr_initial,
            self.lr_min,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Mgd,
    Pgd,
    Cw,
}

impl AttackKind {
    pub const ALL: [AttackKind; 3] = [AttackKind::Mgd, AttackKind::Pgd, AttackKind::Cw];

    pub fn tag(self) -> &'static str {
        match self {
            AttackKind::Mgd => "mgd",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
        }
    }

    /// Runs this attack with the budget parameters of `config`
    /// (`pgd_epsilon`, `cw_c`).
    pub fn run(
        self,
        model: &CodecModel,
        x_src: &Tensor,
        x_tgt: &Tensor,
        config: &AttackConfig,
    ) -> Result<AttackRun, AttackError> {
        match self {
            AttackKind::Mgd => mgd_attack(model, x_src, x_tgt, config),
            AttackKind::Pgd => pgd_attack(model, x_src, x_tgt, config, config.pgd_epsilon),
            AttackKind::Cw => cw_attack(model, x_src, x_tgt, config, config.cw_c),
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| AttackError::Config(format!("unknown attack {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub kind: AttackKind,
    pub config: AttackConfig,
    pub x_src: Tensor,
    pub x_tgt: Tensor,
    pub x_adv: Tensor,
    pub b_tgt: Compressed,
    /// `None` when the final iterate's latent falls outside the prior range.
    pub b_adv: Option<Compressed>,
    pub collided: bool,
    pub iterations_used: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunSummary {
    kind: AttackKind,
    config: AttackConfig,
    collided: bool,
    iterations_used: usize,
    hamming: f64,
    l2_to_src: f64,
    l2_to_tgt: f64,
    msssim_to_src: f64,
    msssim_to_tgt: f64,
    b_tgt_bits: u64,
    b_adv_bits: Option<u64>,
    loss_trace: Vec<f64>,
}

impl AttackRun {
    pub fn hamming(&self) -> f64 {
        match &self.b_adv {
            Some(b) => hamming_normalized(&b.payload, &self.b_tgt.payload),
            None => 1.0,
        }
    }

    /// Metrics of this run as row `pair` of a report.
    pub fn record(&self, pair: usize) -> PairRecord {
        let l2 = |a: &Tensor, b: &Tensor| l2_per_pixel(a, b).expect("run images share a shape");
        let ssim = |a: &Tensor, b: &Tensor| ms_ssim(a, b).map(|m| m.value).expect("run images share a shape");
        PairRecord {
            pair,
            hamming: self.hamming(),
            l2_to_src: l2(&self.x_adv, &self.x_src),
            l2_to_tgt: l2(&self.x_adv, &self.x_tgt),
            msssim_to_src: ssim(&self.x_adv, &self.x_src),
            msssim_to_tgt: ssim(&self.x_adv, &self.x_tgt),
            collided: self.collided,
            iterations: self.iterations_used,
        }
    }

    /// Writes `x_src.ppm`, `x_adv.ppm`, `x_tgt.ppm`, the lossless
    /// `x_adv.raw`, `b_tgt.nicb`, `b_adv.nicb` (when encodable) and
    /// `run.json` into `dir`.
    ///
    /// The PPM copy of `x_adv` is quantized to 8 bits and in general no
    /// longer collides; `x_adv.raw` reproduces the collision exactly.
    pub fn save(&self, dir: &Path) -> Result<(), AttackError> {
        fs::create_dir_all(dir)?;
        imageio::write_ppm(dir.join("x_src.ppm"), &self.x_src)?;
        imageio::write_ppm(dir.join("x_tgt.ppm"), &self.x_tgt)?;
        imageio::write_ppm(dir.join("x_adv.ppm"), &self.x_adv)?;
        imageio::write_raw(dir.join("x_adv.raw"), &self.x_adv)?;
        self.b_tgt.save(dir.join("b_tgt.nicb"))?;
        if let Some(b) = &self.b_adv {
            b.save(dir.join("b_adv.nicb"))?;
        }
        let r = self.record(0);
        let summary = RunSummary {
            kind: self.kind,
            config: self.config.clone(),
            collided: self.collided,
            iterations_used: self.iterations_used,
            hamming: r.hamming,
            l2_to_src: r.l2_to_src,
            l2_to_tgt: r.l2_to_tgt,
            msssim_to_src: r.msssim_to_src,
            msssim_to_tgt: r.msssim_to_tgt,
            b_tgt_bits: self.b_tgt.payload.bit_length(),
            b_adv_bits: self.b_adv.as_ref().map(|b| b.payload.bit_length()),
            loss_trace: self.loss_trace.clone(),
        };
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        imageio::write_atomic(&dir.join("run.json"), json.as_bytes())?;
        Ok(())
    }
}

/// Everything an attack needs besides the iterate: the model used for
/// gradients, the pipeline that judges collisions and the target.
struct Setup<'a> {
    config: &'a AttackConfig,
    grad_model: CodecModel,
    round_f16: bool,
    pipeline: Pipeline,
    x_tgt: Tensor,
    z_tgt: Tensor,
    b_tgt: Compressed,
}

impl<'a> Setup<'a> {
    fn new(
        model: &'a CodecModel,
        x_src: &Tensor,
        x_tgt: &Tensor,
        config: &'a AttackConfig,
    ) -> Result<Self, AttackError> {
        config.validate()?;
        model.check_image(x_src)?;
        model.check_image(x_tgt)?;
        x_src.expect_same_shape(x_tgt)?;
        let pipeline = Pipeline::new(model, config.lpd.unwrap_or(LpdPolicy::INACTIVE));
        let b_tgt = pipeline.compress(x_tgt)?;
        let aware = config.lpd_aware && config.lpd.is_some();
        let grad_model = if aware { pipeline.model().clone() } else { model.clone() };
        let round_f16 = aware && config.lpd.is_some_and(|p| p.latent);
        let mut s = Self {
            config,
            grad_model,
            round_f16,
            pipeline,
            x_tgt: x_tgt.clone(),
            z_tgt: Tensor::scalar(0.0),
            b_tgt,
        };
        let mut tape = Tape::new();
        let xt = tape.constant(x_tgt.clone());
        let zt = s.encode(&mut tape, xt)?;
        s.z_tgt = tape.value(zt).clone();
        Ok(s)
    }

    fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var, AttackError> {
        Ok(if self.round_f16 {
            self.grad_model.analysis_tape_f16(tape, x)?
        } else {
            self.grad_model.analysis_tape(tape, x)?
        })
    }

    /// Latent loss recorded on `tape` for the image held by `x`.
    fn latent_loss_var(&self, tape: &mut Tape, x: Var) -> Result<Var, AttackError> {
        let z = self.encode(tape, x)?;
        let zt = tape.constant(self.z_tgt.clone());
        let d = tape.sub(z, zt)?;
        let l2 = tape.norm(d)?;
        Ok(match self.config.loss {
            LossVariant::LatentL2 => l2,
            LossVariant::LatentL2Cosine => {
                let cs = match self.config.cosine_space {
                    CosineSpace::Latent => tape.cosine(z, zt)?,
                    CosineSpace::Image => {
                        let xt = tape.constant(self.x_tgt.clone());
                        tape.cosine(x, xt)?
                    }
                };
                let penalty = tape.affine(cs, -0.5, 0.5)?;
                tape.add(l2, penalty)?
            }
        })
    }

    fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor), AttackError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let loss = self.latent_loss_var(&mut tape, xv)?;
        let value = tape.value(loss).item()?;
        let grad = tape.backward(loss, &[xv])?.remove(0);
        Ok((value, grad))
    }

    fn check(&self, x: &Tensor) -> Result<(bool, Option<Compressed>), AttackError> {
        let b = self.pipeline.try_compress(x)?;
        let hit = b.as_ref().is_some_and(|b| b.payload == self.b_tgt.payload);
        Ok((hit, b))
    }

    fn should_check(&self, it: usize) -> bool {
        it % self.config.check_every == 0 || it == self.config.max_iterations
    }

    fn finish(
        self,
        kind: AttackKind,
        x_src: &Tensor,
        x_adv: Tensor,
        iterations: usize,
        trace: Vec<f64>,
    ) -> Result<AttackRun, AttackError> {
        let (collided, b_adv) = self.check(&x_adv)?;
        Ok(AttackRun {
            kind,
            config: self.config.clone(),
            x_src: x_src.clone(),
            x_tgt: self.x_tgt,
            x_adv,
            b_tgt: self.b_tgt,
            b_adv,
            collided,
            iterations_used: iterations,
            loss_trace: trace,
        })
    }
}

/// `||f(x) - f(x_tgt)||`, plus `(1 - cos) / 2` for the combined variant,
/// evaluated at `f64` on the full-precision analysis transform.
pub fn latent_loss(
    model: &CodecModel,
    x: &Tensor,
    x_tgt: &Tensor,
    variant: LossVariant,
    cosine_space: CosineSpace,
) -> Result<f64, AttackError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = model.analysis_tape(&mut tape, xv)?;
    let xt = tape.constant(x_tgt.clone());
    let ztv = model.analysis_tape(&mut tape, xt)?;
    let d = tape.sub(z, ztv)?;
    let l2 = tape.value(d).norm();
    Ok(match variant {
        LossVariant::LatentL2 => l2,
        LossVariant::LatentL2Cosine => {
            let cs = match cosine_space {
                CosineSpace::Latent => tape.cosine(z, ztv)?,
                CosineSpace::Image => tape.cosine(xv, xt)?,
            };
            l2 + 0.5 * (1.0 - tape.value(cs).item()?)
        }
    })
}

fn finite(v: f64, iteration: usize) -> Result<f64, AttackError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AttackError::NonFinite { iteration })
    }
}

/// Masked gradient descent. Starts at `x_src`, takes Adam steps on the
/// masked gradient of the latent loss with a cosine-annealed rate, clamps
/// to `[0, 1]` and stops at the first checked iterate whose bitstream equals
/// the target's.
pub fn mgd_attack(
    model: &CodecModel,
    x_src: &Tensor,
    x_tgt: &Tensor,
    config: &AttackConfig,
) -> Result<AttackRun, AttackError> {
    let setup = Setup::new(model, x_src, x_tgt, config)?;
    let mut x = x_src.clone();
    let mut trace = Vec::new();
    if setup.check(&x)?.0 {
        return setup.finish(AttackKind::Mgd, x_src, x, 0, trace);
    }
    let (_, c, h, w) = x.dims4()?;
    let flags = config.mask.flags(c, h, w);
    let mut adam = Adam::with_defaults(&[x.numel()]);
    let mut used = 0;
    for it in 1..=config.max_iterations {
        used = it;
        let (loss, grad) = setup.loss_and_grad(&x)?;
        trace.push(finite(loss, it)?);
        let masked: Vec<f64> = grad
            .data()
            .iter()
            .zip(&flags)
            .map(|(&g, &ok)| if ok { g } else { 0.0 })
            .collect();
        let mut data = x.into_data();
        adam.step(&mut [&mut data], &[&masked], config.lr(it - 1)?)?;
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        x = Tensor::new(&[1, c, h, w], data)?;
        if setup.should_check(it) && setup.check(&x)?.0 {
            break;
        }
    }
    setup.finish(AttackKind::Mgd, x_src, x, used, trace)
}

/// Projected gradient descent: unmasked sign steps of size
/// `2.5 * epsilon / max_iterations`, projected onto the L-infinity ball of
/// radius `epsilon` around `x_src` and clamped to `[0, 1]`.
pub fn pgd_attack(
    model: &CodecModel,
    x_src: &Tensor,
    x_tgt: &Tensor,
    config: &AttackConfig,
    epsilon: f64,
) -> Result<AttackRun, AttackError> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(AttackError::Config(format!(
            "epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    let setup = Setup::new(model, x_src, x_tgt, config)?;
    let mut x = x_src.clone();
    let mut trace = Vec::new();
    if setup.check(&x)?.0 {
        return setup.finish(AttackKind::Pgd, x_src, x, 0, trace);
    }
    let mu = 2.5 * epsilon / config.max_iterations as f64;
    let mut used = 0;
    for it in 1..=config.max_iterations {
        used = it;
        let (loss, grad) = setup.loss_and_grad(&x)?;
        trace.push(finite(loss, it)?);
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(grad.data())
            .zip(x_src.data())
            .map(|((&v, &g), &s)| {
                let step = v - mu * sign(g);
                step.clamp(s - epsilon, s + epsilon).clamp(0.0, 1.0)
            })
            .collect();
        x = Tensor::new(x_src.shape(), data)?;
        if setup.should_check(it) && setup.check(&x)?.0 {
            break;
        }
    }
    setup.finish(AttackKind::Pgd, x_src, x, used, trace)
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Carlini-Wagner style attack with fixed `c`: Adam on `w` where
/// `x = (tanh(w) + 1) / 2`, minimising `latent_loss(x) + c * ||x - x_src||^2`.
pub fn cw_attack(
    model: &CodecModel,
    x_src: &Tensor,
    x_tgt: &Tensor,
    config: &AttackConfig,
    c: f64,
) -> Result<AttackRun, AttackError> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(AttackError::Config(format!("c must be positive and finite, got {c}")));
    }
    let setup = Setup::new(model, x_src, x_tgt, config)?;
    let mut trace = Vec::new();
    if setup.check(x_src)?.0 {
        return setup.finish(AttackKind::Cw, x_src, x_src.clone(), 0, trace);
    }
    let mut w: Vec<f64> = x_src
        .data()
        .iter()
        .map(|&v| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh())
        .collect();
    let to_image = |w: &[f64]| Tensor::new(x_src.shape(), w.iter().map(|v| 0.5 * v.tanh() + 0.5).collect());
    let mut adam = Adam::with_defaults(&[w.len()]);
    let mut used = 0;
    for it in 1..=config.max_iterations {
        used = it;
        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::new(x_src.shape(), w.clone())?, true);
        let t = tape.tanh(wv)?;
        let x = tape.affine(t, 0.5, 0.5)?;
        let latent = setup.latent_loss_var(&mut tape, x)?;
        let src = tape.constant(x_src.clone());
        let d = tape.sub(x, src)?;
        let sq = tape.mul(d, d)?;
        let dist = tape.sum(sq)?;
        let penalty = tape.affine(dist, c, 0.0)?;
        let loss = tape.add(latent, penalty)?;
        trace.push(finite(tape.value(loss).item()?, it)?);
        let g = tape.backward(loss, &[wv])?.remove(0);
        adam.step(&mut [&mut w], &[g.data()], config.lr(it - 1)?)?;
        if setup.should_check(it) && setup.check(&to_image(&w)?)?.0 {
            break;
        }
    }
    let x_adv = to_image(&w)?;
    setup.finish(AttackKind::Cw, x_src, x_adv, used, trace)
}

/// Whether a run's `x_adv` also collides with its target under `model_b`.
pub fn transfer_check(model_b: &CodecModel, run: &AttackRun) -> Result<bool, AttackError> {
    if !run.collided {
        return Err(AttackError::NotCollided);
    }
    model_b.check_image(&run.x_adv)?;
    let pipeline = Pipeline::new(model_b, LpdPolicy::INACTIVE);
    let target = pipeline.compress(&run.x_tgt)?;
    Ok(pipeline
        .try_compress(&run.x_adv)?
        .is_some_and(|b| b.payload == target.payload))
}

/// Pixels of `x_adv` outside the mask grid that differ from `x_src` in any
/// bit. Empty for every MGD run.
pub fn mask_violations(run: &AttackRun, mask: &MaskSpec) -> Result<Vec<usize>, AttackError> {
    let (_, c, h, w) = run.x_src.dims4()?;
    let flags = mask.flags(c, h, w);
    Ok(run
        .x_src
        .data()
        .iter()
        .zip(run.x_adv.data())
        .zip(&flags)
        .enumerate()
        .filter(|(_, ((a, b), &ok))| !ok && a.to_bits() != b.to_bits())
        .map(|(i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{fit_prior, Architecture, ModelConfig};
    use crate::experiments::data::{synthetic_dataset, Synthetic};

    fn fitted(arch: Architecture) -> (CodecModel, Vec<Tensor>) {
        let data = synthetic_dataset(Synthetic::Scenes, 6, 32, 11);
        let m = CodecModel::init(ModelConfig::new(arch, 1).unwrap(), 5).unwrap();
        let m = m.clone().with_entropy(fit_prior(&m, &data).unwrap()).unwrap();
        (m, data)
    }

    #[test]
    fn mask_examples() {
        let g = Tensor::from_fn(&[1, 2, 6, 6], |i| i as f64 + 1.0).unwrap();
        assert_eq!(apply_dot_mask(&g, &MaskSpec::FULL).unwrap(), g);
        let m = MaskSpec::default();
        let out = apply_dot_mask(&g, &m).unwrap();
        for ch in 0..2 {
            let plane = &out.data()[ch * 36..(ch + 1) * 36];
            assert_eq!(plane.iter().filter(|&&v| v != 0.0).count(), 12);
            for (i, &v) in plane.iter().enumerate() {
                assert_eq!(v != 0.0, i / 6 == 0 || i / 6 == 3);
            }
        }
        assert_eq!(apply_dot_mask(&out, &m).unwrap(), out);
        assert!(apply_dot_mask(&Tensor::zeros(&[1, 1, 6, 6]), &m)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn mask_density_counts_grid_points() {
        let m = MaskSpec {
            delta_h: 3,
            delta_w: 2,
            h0: 1,
            w0: 1,
        };
        let (h, w) = (7, 5);
        let direct = (0..h * w).filter(|i| m.allows(i / w, i % w)).count();
        assert_eq!(m.density(h, w), direct as f64 / 35.0);
        assert!(MaskSpec { h0: 3, ..m }.validate().is_err());
    }

    #[test]
    fn latent_loss_matches_flat_recomputation() {
        let (m, data) = fitted(Architecture::FpGdn);
        let (x, t) = (&data[0], &data[1]);
        let za = m.encode_latent_f64(x).unwrap();
        let zb = m.encode_latent_f64(t).unwrap();
        let mut dd = 0.0;
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (a, b) in za.data().iter().zip(zb.data()) {
            dd += (a - b) * (a - b);
            ab += a * b;
            aa += a * a;
            bb += b * b;
        }
        let l2 = latent_loss(&m, x, t, LossVariant::LatentL2, CosineSpace::Latent).unwrap();
        assert!((l2 - dd.sqrt()).abs() < 1e-10);
        let both = latent_loss(&m, x, t, LossVariant::LatentL2Cosine, CosineSpace::Latent).unwrap();
        let expect = dd.sqrt() + 0.5 * (1.0 - ab / (aa.sqrt() * bb.sqrt()));
        assert!((both - expect).abs() < 1e-10);
        assert_eq!(
            latent_loss(&m, x, x, LossVariant::LatentL2Cosine, CosineSpace::Latent).unwrap(),
            0.0
        );
    }

    #[test]
    fn identical_pair_collides_immediately() {
        let (m, data) = fitted(Architecture::FpRelu);
        let run = mgd_attack(&m, &data[0], &data[0], &AttackConfig::default()).unwrap();
        assert!(run.collided);
        assert_eq!(run.iterations_used, 0);
        assert!(transfer_check(&m, &run).unwrap());
    }

    #[test]
    fn mgd_leaves_off_grid_pixels_untouched() {
        let (m, data) = fitted(Architecture::FpGdn);
        let cfg = AttackConfig {
            max_iterations: 30,
            check_every: 10,
            ..AttackConfig::default()
        };
        let run = mgd_attack(&m, &data[0], &data[1], &cfg).unwrap();
        assert!(run.iterations_used <= 30);
        assert_eq!(run.loss_trace.len(), run.iterations_used);
        assert!(mask_violations(&run, &cfg.mask).unwrap().is_empty());
        assert_ne!(run.x_adv, run.x_src);
        let first = run.loss_trace[0];
        assert!(*run.loss_trace.last().unwrap() < first);
    }

    #[test]
    fn pgd_stays_in_the_ball() {
        let (m, data) = fitted(Architecture::FpGdn);
        let cfg = AttackConfig {
            max_iterations: 20,
            ..AttackConfig::default()
        };
        let eps = 0.01;
        let run = pgd_attack(&m, &data[2], &data[3], &cfg, eps).unwrap();
        let linf = run
            .x_adv
            .data()
            .iter()
            .zip(run.x_src.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf <= eps + 1e-9);
        let still = pgd_attack(&m, &data[2], &data[3], &cfg, 0.0).unwrap();
        assert_eq!(still.x_adv, still.x_src);
        assert!(!still.collided);
    }

    #[test]
    fn cw_with_huge_c_stays_at_source() {
        let (m, data) = fitted(Architecture::FpGdn);
        let cfg = AttackConfig {
            max_iterations: 10,
            ..AttackConfig::default()
        };
        let run = cw_attack(&m, &data[0], &data[1], &cfg, 1e9).unwrap();
        assert_eq!(run.loss_trace.len(), 10);
        assert!(run.loss_trace.iter().all(|v| v.is_finite()));
        assert!(l2_per_pixel(&run.x_adv, &run.x_src).unwrap() < 0.05);
    }

    #[test]
    fn transfer_needs_a_collision() {
        let (m, data) = fitted(Architecture::FpGdn);
        let cfg = AttackConfig {
            max_iterations: 2,
            ..AttackConfig::default()
        };
        let run = mgd_attack(&m, &data[0], &data[1], &cfg).unwrap();
        if !run.collided {
            assert!(matches!(transfer_check(&m, &run), Err(AttackError::NotCollided)));
        }
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let c = AttackConfig {
            lpd: Some(LpdPolicy::default()),
            ..AttackConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(AttackConfig::from_json(&s).unwrap(), c);
        let partial =
            AttackConfig::from_json(r#"{"max_iterations": 7, "mask": {"delta_h": 2, "delta_w": 2, "h0": 1, "w0": 0}}"#)
                .unwrap();
        assert_eq!(partial.max_iterations, 7);
        assert_eq!(partial.lr_initial, 0.03);
        assert!(AttackConfig::from_json(r#"{"max_iterations": 0}"#).is_err());
        assert!(AttackConfig::from_json(r#"{"lpd": {"latent": false, "weights": false}}"#).is_err());
    }
}
