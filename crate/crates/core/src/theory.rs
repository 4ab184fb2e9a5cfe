//! Thresholded-transform collision model: compression ratio, the
//! collision-distance curve of an orthogonal-transform codec, its Monte
//! Carlo check, and empirical Lipschitz / contraction constants of an
//! encoder.
//!
//! The source is a standard normal. Coefficients with magnitude above `γ`
//! are kept, the rest discarded. With `P = erf(γ/√2)` (the discarded mass),
//! `R = 1 / (1 - P)` and the collision distance is
//!
//! ```text
//! D² = (R-1)/R · ∫∫_{[-γ,γ]²} (x-y)² p(x) p(y) dx dy = 2 P² (P - 2γ φ(γ))
//! ```
//!
//! where the double integral splits into one-dimensional moments because
//! the cross term is odd.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, CodecModel};
use crate::experiments::derive_seed;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("no usable pairs: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Error function. Below `|x| = 3` a positive-term series
/// `erf(x) = 2/√π · e^{-x²} Σ 2ⁿ x^{2n+1} / (2n+1)!!` is summed to machine
/// precision; above, `1 - erfc(x)` with the continued fraction.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 3.0 {
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= 2.0 * x2 / (2.0 * n + 1.0);
            sum += term;
            if term <= sum * 1e-17 {
                break;
            }
        }
        FRAC_2_SQRT_PI * (-x2).exp() * sum
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function, accurate in relative terms in the upper
/// tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x < 3.0 {
        1.0 - erf(x)
    } else {
        erfc_cf(x)
    }
}

/// `erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated with the modified Lentz method; used for `x >= 3`.
fn erfc_cf(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (std::f64::consts::PI.sqrt() * f)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_gamma(gamma: f64) -> Result<(), TheoryError> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(TheoryError::Invalid(format!(
            "gamma must be finite and non-negative, got {gamma}"
        )));
    }
    Ok(())
}

/// `R = 1 / erfc(γ/√2)`: one over the two-sided tail mass beyond `γ`.
/// Returns `+∞` (with a warning) once the tail underflows.
pub fn compression_ratio(gamma: f64) -> Result<f64, TheoryError> {
    check_gamma(gamma)?;
    let tail = erfc(gamma / std::f64::consts::SQRT_2);
    if tail == 0.0 {
        log::warn!("tail mass underflows at gamma = {gamma}; ratio is infinite");
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / tail)
}

/// Collision distance of the thresholded orthogonal codec, in closed form.
pub fn collision_distance_conventional(gamma: f64) -> Result<f64, TheoryError> {
    check_gamma(gamma)?;
    let p = erf(gamma / std::f64::consts::SQRT_2);
    let second_moment = (p - 2.0 * gamma * normal_pdf(gamma)).max(0.0);
    Ok((2.0 * p * p * second_moment).sqrt())
}

/// The same quantity by brute force: `(R-1)/R` and the double integral are
/// both computed with composite trapezoid rules of step `h` (the 2-D rule
/// is a genuine double loop), without any error-function evaluation.
pub fn collision_distance_quadrature(gamma: f64, h: f64) -> Result<f64, TheoryError> {
    check_gamma(gamma)?;
    if !(h > 0.0) {
        return Err(TheoryError::Invalid("quadrature step must be positive".into()));
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let n = (2.0 * gamma / h).ceil() as usize;
    let step = 2.0 * gamma / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| -gamma + i as f64 * step).collect();
    let wp: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == 0 || i == n { 0.5 } else { 1.0 } * normal_pdf(x))
        .collect();
    let kept_fraction: f64 = step * wp.iter().sum::<f64>();
    let mut double = 0.0;
    for (&x, &wx) in xs.iter().zip(&wp) {
        let mut row = 0.0;
        for (&y, &wy) in xs.iter().zip(&wp) {
            let d = x - y;
            row += d * d * wy;
        }
        double += wx * row;
    }
    double *= step * step;
    Ok((kept_fraction * double).max(0.0).sqrt())
}

/// Sampled `(γ, R, D)` triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryCurve {
    pub samples: Vec<TheoryPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryPoint {
    pub gamma: f64,
    pub ratio: f64,
    pub distance: f64,
}

impl TheoryCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gamma,R,D_c\n");
        for p in &self.samples {
            s.push_str(&format!("{},{},{}\n", p.gamma, p.ratio, p.distance));
        }
        s
    }

    /// Whether both coordinates are non-decreasing along the curve.
    pub fn is_monotone(&self) -> bool {
        self.samples
            .windows(2)
            .all(|w| w[1].ratio >= w[0].ratio && w[1].distance >= w[0].distance)
    }
}

pub fn theory_curve(gammas: &[f64]) -> Result<TheoryCurve, TheoryError> {
    if gammas.windows(2).any(|w| w[1] < w[0]) {
        return Err(TheoryError::Invalid("gammas must be sorted".into()));
    }
    let samples = gammas
        .iter()
        .map(|&g| {
            Ok(TheoryPoint {
                gamma: g,
                ratio: compression_ratio(g)?,
                distance: collision_distance_conventional(g)?,
            })
        })
        .collect::<Result<Vec<_>, TheoryError>>()?;
    Ok(TheoryCurve { samples })
}

/// `count` evenly spaced values from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Mean and standard error of a Monte Carlo distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub distance: f64,
    pub std_err: f64,
    pub trials: usize,
}

impl Estimate {
    /// From per-trial squared distances; the standard error of the root is
    /// propagated with the delta method.
    fn from_squares(sq: &[f64]) -> Self {
        let n = sq.len() as f64;
        let mean = sq.iter().sum::<f64>() / n;
        let var = sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let distance = mean.max(0.0).sqrt();
        let se_sq = (var / n).sqrt();
        let std_err = if distance > 0.0 { se_sq / (2.0 * distance) } else { 0.0 };
        Self {
            distance,
            std_err,
            trials: sq.len(),
        }
    }

    /// `|distance - reference| <= k * std_err`, exact equality when the
    /// standard error vanishes.
    pub fn agrees_with(&self, reference: f64, k: f64) -> bool {
        (self.distance - reference).abs() <= k * self.std_err + 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub gamma: f64,
    pub dimension: usize,
    /// i.i.d. normal coefficients.
    pub direct: Estimate,
    /// Coefficients obtained by an orthonormal DCT of normal pixel arrays,
    /// distances measured back in the pixel domain.
    pub dct: Estimate,
}

const MC_CHUNK: usize = 250;

/// One trial's squared distance given target and second-image
/// coefficients. Kept coefficients of the collision are copied from the
/// target; a discarded coordinate contributes `(t - a)²` when the other
/// image's coefficient is discarded as well (otherwise it would be kept and
/// change the stream, so the coordinate takes the target value). The sum
/// is divided by `M` and scaled by the empirical `(R-1)/R`, the discarded
/// fraction.
fn collided(target: &[f64], other: &[f64], gamma: f64) -> (Vec<f64>, f64) {
    let mut adv = target.to_vec();
    let mut discarded = 0usize;
    for (i, (&t, &o)) in target.iter().zip(other).enumerate() {
        if t.abs() <= gamma {
            discarded += 1;
            if o.abs() <= gamma {
                adv[i] = o;
            }
        }
    }
    (adv, discarded as f64 / target.len() as f64)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Monte Carlo estimate of the collision distance at threshold `gamma`,
/// directly on normal coefficients and through a 2-D orthonormal DCT of
/// normal "images" (1-D when `dimension` is not a square). The DCT run uses
/// a fifth of the trials (at least 200).
pub fn mc_verify_theorem1(gamma: f64, dimension: usize, trials: usize, seed: u64) -> Result<McResult, TheoryError> {
    check_gamma(gamma)?;
    if dimension == 0 || trials < 2 {
        return Err(TheoryError::Invalid(
            "need a positive dimension and at least two trials".into(),
        ));
    }
    let chunks = trials.div_ceil(MC_CHUNK);
    let direct: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let n = MC_CHUNK.min(trials - c * MC_CHUNK);
            (0..n)
                .map(|_| {
                    let t: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let o: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let (adv, frac) = collided(&t, &o, gamma);
                    frac * squared_distance(&t, &adv) / dimension as f64
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let dct = Dct::new(dimension);
    let dct_trials = (trials / 5).max(200);
    let dct_chunks = dct_trials.div_ceil(MC_CHUNK);
    let dct_sq: Vec<f64> = (0..dct_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0xd1c7, c as u64));
            let n = MC_CHUNK.min(dct_trials - c * MC_CHUNK);
            let dct = &dct;
            (0..n)
                .map(move |_| {
                    let x_tgt: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let x_other: Vec<f64> = (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let (adv, frac) = collided(&dct.forward(&x_tgt), &dct.forward(&x_other), gamma);
                    let x_adv = dct.inverse(&adv);
                    frac * squared_distance(&x_tgt, &x_adv) / dimension as f64
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(McResult {
        gamma,
        dimension,
        direct: Estimate::from_squares(&direct),
        dct: Estimate::from_squares(&dct_sq),
    })
}

/// Orthonormal DCT-II, separable over a square grid when the length is a
/// perfect square.
#[derive(Debug, Clone)]
pub struct Dct {
    side: usize,
    rows: usize,
    basis: Vec<f64>,
}

impl Dct {
    pub fn new(len: usize) -> Self {
        let root = (len as f64).sqrt().round() as usize;
        let (side, rows) = if root * root == len { (root, root) } else { (len, 1) };
        let mut basis = vec![0.0; side * side];
        for k in 0..side {
            let scale = if k == 0 {
                (1.0 / side as f64).sqrt()
            } else {
                (2.0 / side as f64).sqrt()
            };
            for n in 0..side {
                basis[k * side + n] = scale * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / side as f64).cos();
            }
        }
        Self { side, rows, basis }
    }

    fn apply_1d(&self, v: &[f64], out: &mut [f64], transpose: bool) {
        let s = self.side;
        for k in 0..s {
            let mut acc = 0.0;
            for n in 0..s {
                let b = if transpose {
                    self.basis[n * s + k]
                } else {
                    self.basis[k * s + n]
                };
                acc += b * v[n];
            }
            out[k] = acc;
        }
    }

    fn apply(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let s = self.side;
        if self.rows == 1 {
            let mut out = vec![0.0; s];
            self.apply_1d(x, &mut out, transpose);
            return out;
        }
        let mut tmp = vec![0.0; s * s];
        for r in 0..s {
            self.apply_1d(&x[r * s..(r + 1) * s], &mut tmp[r * s..(r + 1) * s], transpose);
        }
        let mut out = vec![0.0; s * s];
        let (mut col, mut res) = (vec![0.0; s], vec![0.0; s]);
        for c in 0..s {
            for r in 0..s {
                col[r] = tmp[r * s + c];
            }
            self.apply_1d(&col, &mut res, transpose);
            for r in 0..s {
                out[r * s + c] = res[r];
            }
        }
        out
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x, false)
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        self.apply(z, true)
    }
}

/// Maximum of a distance ratio over pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimate {
    pub value: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

fn diff_norm(a: &Tensor, b: &Tensor) -> Result<f64, TheoryError> {
    a.expect_same_shape(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn max_ratio(
    f: &dyn Fn(&Tensor) -> Result<Tensor, TheoryError>,
    pairs: &[(Tensor, Tensor)],
    latent_over_input: bool,
) -> Result<ConstantEstimate, TheoryError> {
    let mut best = 0.0f64;
    let (mut used, mut skipped) = (0, 0);
    for (x, y) in pairs {
        let dx = diff_norm(x, y)?;
        let dz = diff_norm(&f(x)?, &f(y)?)?;
        let (num, den) = if latent_over_input { (dz, dx) } else { (dx, dz) };
        if den == 0.0 || num == 0.0 {
            skipped += 1;
            continue;
        }
        used += 1;
        best = best.max(num / den);
    }
    if used == 0 {
        return Err(TheoryError::Degenerate(format!(
            "all {skipped} pairs have equal inputs or latents"
        )));
    }
    Ok(ConstantEstimate {
        value: best,
        pairs_used: used,
        pairs_skipped: skipped,
    })
}

/// Empirical contraction constant `max ||x-y|| / ||f(x)-f(y)||`, a lower
/// bound on the true constant. Pairs with equal inputs or latents are
/// skipped and counted.
pub fn estimate_contraction_constant(
    f: &dyn Fn(&Tensor) -> Result<Tensor, TheoryError>,
    pairs: &[(Tensor, Tensor)],
) -> Result<ConstantEstimate, TheoryError> {
    max_ratio(f, pairs, false)
}

/// Empirical Lipschitz constant `max ||f(x)-f(y)|| / ||x-y||`.
pub fn estimate_lipschitz(
    f: &dyn Fn(&Tensor) -> Result<Tensor, TheoryError>,
    pairs: &[(Tensor, Tensor)],
) -> Result<ConstantEstimate, TheoryError> {
    max_ratio(f, pairs, true)
}

/// The analysis transform of `model` at full precision.
pub fn model_encoder(model: &CodecModel) -> impl Fn(&Tensor) -> Result<Tensor, TheoryError> + '_ {
    move |x| Ok(model.encode_latent_f64(x)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub l_estimate: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Indices of runs with `||x_tgt - x_adv|| < ||f(x_tgt) - f(x_adv)|| / L`.
    pub violations: Vec<usize>,
    /// Smallest `||x_tgt - x_adv|| - ||f(x_tgt) - f(x_adv)|| / L` observed.
    pub min_slack: Option<f64>,
}

/// Checks the lower bound `||x_tgt - x_adv|| >= ||f(x_tgt) - f(x_adv)|| / L`
/// on each `(x_tgt, x_adv)` pair. Pairs with identical images are skipped.
/// `L` is an empirical lower bound, so the check is looser than the bound
/// with the true constant.
pub fn check_lipschitz_bound(
    f: &dyn Fn(&Tensor) -> Result<Tensor, TheoryError>,
    runs: &[(Tensor, Tensor)],
    l_estimate: f64,
) -> Result<LipschitzReport, TheoryError> {
    if runs.is_empty() {
        return Err(TheoryError::Invalid("no runs to check".into()));
    }
    if !(l_estimate > 0.0) || !l_estimate.is_finite() {
        return Err(TheoryError::Invalid("L must be positive and finite".into()));
    }
    let mut report = LipschitzReport {
        l_estimate,
        checked: 0,
        skipped: 0,
        violations: Vec::new(),
        min_slack: None,
    };
    for (i, (t, a)) in runs.iter().enumerate() {
        let dx = diff_norm(t, a)?;
        if dx == 0.0 {
            report.skipped += 1;
            continue;
        }
        let dz = diff_norm(&f(t)?, &f(a)?)?;
        let slack = dx - dz / l_estimate;
        report.checked += 1;
        report.min_slack = Some(report.min_slack.map_or(slack, |m: f64| m.min(slack)));
        if slack < -1e-12 * dx.max(1.0) {
            report.violations.push(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain alternating Maclaurin series, summed in extended steps; only
    /// trustworthy for small arguments.
    fn erf_maclaurin(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut pow = x;
        let mut fact = 1.0;
        for n in 0..60 {
            if n > 0 {
                fact *= n as f64;
                pow *= x * x;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * pow / (fact * (2 * n + 1) as f64);
        }
        FRAC_2_SQRT_PI * sum
    }

    #[test]
    fn erf_matches_independent_series_and_tabulated_values() {
        for i in 0..=20 {
            let x = i as f64 * 0.1;
            assert!((erf(x) - erf_maclaurin(x)).abs() < 1e-14, "x = {x}");
        }
        // Abramowitz and Stegun table 7.1.
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erfc(3.0) - 2.209_049_699_858_544e-5).abs() < 1e-18);
        assert!((erfc(5.0) - 1.537_459_794_428_035e-12).abs() < 1e-24);
        // The two branches meet continuously.
        assert!((erf(3.0 - 1e-12) - erf(3.0)).abs() < 1e-13);
        assert_eq!(erf(-0.7), -erf(0.7));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compression_ratio(0.0).unwrap(), 1.0);
        let r1 = compression_ratio(1.0).unwrap();
        assert!((r1 - 3.151_487).abs() < 1e-4, "{r1}");
        let g = linspace(0.0, 6.0, 61);
        let rs: Vec<f64> = g.iter().map(|&x| compression_ratio(x).unwrap()).collect();
        assert!(rs.windows(2).all(|w| w[1] > w[0]));
        assert!(compression_ratio(-1.0).is_err());
        assert_eq!(compression_ratio(60.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ratio_matches_sampled_tail_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400_000;
        let beyond = (0..n)
            .filter(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.abs() > 1.0
            })
            .count();
        let p = beyond as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let r = compression_ratio(1.0).unwrap();
        assert!((1.0 / r - p).abs() < 4.0 * se);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(collision_distance_conventional(0.0).unwrap(), 0.0);
        let d6 = collision_distance_conventional(6.0).unwrap();
        assert!((d6 - 2f64.sqrt()).abs() < 1e-3);
        let d1 = collision_distance_conventional(1.0).unwrap();
        let q1 = collision_distance_quadrature(1.0, 1e-3).unwrap();
        assert!((d1 - q1).abs() < 1e-6, "{d1} vs {q1}");
        assert!((d1 - 0.430_42).abs() < 1e-5, "{d1}");
    }

    #[test]
    fn quadrature_converges_under_refinement() {
        for g in [0.5, 2.0] {
            let coarse = collision_distance_quadrature(g, 1e-3).unwrap();
            let fine = collision_distance_quadrature(g, 5e-4).unwrap();
            let exact = collision_distance_conventional(g).unwrap();
            // Trapezoid error is O(h²): halving h cuts it by about four.
            assert!((fine - exact).abs() <= (coarse - exact).abs() / 3.0 + 1e-13);
        }
    }

    #[test]
    fn curve_is_monotone_and_bounded() {
        let c = theory_curve(&linspace(0.0, 6.0, 25)).unwrap();
        assert!(c.is_monotone());
        assert_eq!((c.samples[0].ratio, c.samples[0].distance), (1.0, 0.0));
        assert!(c.samples.iter().all(|p| p.distance <= 2f64.sqrt() + 1e-6));
        assert!(theory_curve(&[1.0, 0.5]).is_err());
        assert!(c.to_csv().starts_with("gamma,R,D_c\n"));
    }

    #[test]
    fn dct_is_orthonormal() {
        for len in [16, 7] {
            let d = Dct::new(len);
            let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.7).sin()).collect();
            let z = d.forward(&x);
            let back = d.inverse(&z);
            assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
            let (nx, nz): (f64, f64) = (x.iter().map(|v| v * v).sum(), z.iter().map(|v| v * v).sum());
            assert!((nx - nz).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_small_cases() {
        let zero = mc_verify_theorem1(0.0, 64, 1000, 1).unwrap();
        assert_eq!(zero.direct.distance, 0.0);
        assert_eq!(zero.dct.distance, 0.0);
        let r = mc_verify_theorem1(1.0, 256, 2000, 2).unwrap();
        let d = collision_distance_conventional(1.0).unwrap();
        assert!(r.direct.agrees_with(d, 3.0), "{:?} vs {d}", r.direct);
        assert!(r.dct.agrees_with(d, 3.0), "{:?} vs {d}", r.dct);
        assert_eq!(r, mc_verify_theorem1(1.0, 256, 2000, 2).unwrap());
    }

    fn pairs() -> Vec<(Tensor, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..20)
            .map(|_| {
                let mut draw = || Tensor::from_fn(&[1, 1, 2, 3], |_| StandardNormal.sample(&mut rng)).unwrap();
                (draw(), draw())
            })
            .collect()
    }

    #[test]
    fn constants_of_linear_maps() {
        let id = |x: &Tensor| Ok(x.clone());
        let twice = |x: &Tensor| Ok(x.map(|v| 2.0 * v)?);
        assert!((estimate_contraction_constant(&id, &pairs()).unwrap().value - 1.0).abs() < 1e-12);
        assert!((estimate_contraction_constant(&twice, &pairs()).unwrap().value - 0.5).abs() < 1e-12);
        let l = estimate_lipschitz(&twice, &pairs()).unwrap();
        assert!((l.value - 2.0).abs() < 1e-12);
        let runs = pairs();
        let rep = check_lipschitz_bound(&twice, &runs, 2.0).unwrap();
        assert!(rep.violations.is_empty());
        assert!(rep.min_slack.unwrap().abs() < 1e-9);
        assert!(!check_lipschitz_bound(&twice, &runs, 1.0).unwrap().violations.is_empty());
    }

    #[test]
    fn degenerate_pairs_are_skipped() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.3);
        let id = |x: &Tensor| Ok(x.clone());
        assert!(estimate_contraction_constant(&id, &[(x.clone(), x.clone())]).is_err());
        let rep = check_lipschitz_bound(
            &id,
            &[(x.clone(), x.clone()), (x.clone(), Tensor::zeros(&[1, 1, 2, 2]))],
            1.0,
        )
        .unwrap();
        assert_eq!((rep.checked, rep.skipped), (1, 1));
    }
}
