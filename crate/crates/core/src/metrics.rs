//! Bitstream Hamming distance, attack success rate, per-pixel L2 and
//! MS-SSIM, plus the per-pair report format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Bitstream;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty report list")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// Fraction of differing payload bits. Streams of different bit length are
/// at distance 1.0.
pub fn hamming_normalized(b1: &Bitstream, b2: &Bitstream) -> f64 {
    if b1.bit_length() != b2.bit_length() {
        return 1.0;
    }
    let n = b1.bit_length();
    if n == 0 {
        return 0.0;
    }
    let differing: u64 = b1
        .bytes()
        .iter()
        .zip(b2.bytes())
        .map(|(a, b)| u64::from((a ^ b).count_ones()))
        .sum();
    differing as f64 / n as f64
}

/// Fraction of records whose Hamming distance is exactly zero.
pub fn asr(reports: &[PairRecord]) -> Result<f64, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = reports.iter().filter(|r| r.hamming == 0.0).count();
    Ok(hits as f64 / reports.len() as f64)
}

/// Root-mean-square difference over all scalar entries.
pub fn l2_per_pixel(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    x.expect_same_shape(y)?;
    if x.numel() == 0 {
        return Err(MetricError::Invalid("empty tensors".into()));
    }
    let mut acc = 0.0;
    for (a, b) in x.data().iter().zip(y.data()) {
        acc += (a - b) * (a - b);
    }
    Ok((acc / x.numel() as f64).sqrt())
}

/// PSNR in dB for images in `[0, 1]`; infinite for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    let rmse = l2_per_pixel(x, y)?;
    Ok(-20.0 * rmse.log10())
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// MS-SSIM value and the number of scales actually used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsSsim {
    pub value: f64,
    pub scales: usize,
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * p[y * w + x + i];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ho, wo) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let n = (ho * wo) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ho * wo {
        let va = aa[i] - mu_a[i] * mu_a[i];
        let vb = bb[i] - mu_b[i] * mu_b[i];
        let cov = ab[i] - mu_a[i] * mu_b[i];
        let cs_i = (2.0 * cov + c2) / (va + vb + c2);
        let l_i = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        ssim += l_i * cs_i;
        cs += cs_i;
    }
    (ssim / n, cs / n)
}

/// 2x2 average pooling (odd trailing rows/columns dropped).
fn downsample(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let s = p[2 * y * w + 2 * x]
                + p[2 * y * w + 2 * x + 1]
                + p[(2 * y + 1) * w + 2 * x]
                + p[(2 * y + 1) * w + 2 * x + 1];
            out[y * wo + x] = s / 4.0;
        }
    }
    (out, ho, wo)
}

/// Multi-scale SSIM over `(1,C,H,W)` or `(C,H,W)` images in `[0,1]`,
/// averaged over channels per scale.
///
/// Uses five scales when the smaller side is at least 176 pixels. Smaller
/// images use as many scales as fit (each scale needs the 11-pixel window)
/// with the leading weights renormalized to sum to one. Negative
/// contrast-structure values are clamped to zero before exponentiation.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<MsSsim, MetricError> {
    x.expect_same_shape(y)?;
    let (c, h, w) = match *x.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => {
            return Err(MetricError::Invalid(format!(
                "expected an image tensor, got {:?}",
                x.shape()
            )))
        }
    };
    let mut scales = 0;
    while scales < MS_SSIM_WEIGHTS.len() && h.min(w) >> scales >= WINDOW {
        scales += 1;
    }
    if scales == 0 {
        return Err(MetricError::Invalid(format!(
            "{h}x{w} is smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let plane = h * w;
    let mut per_scale = vec![(0.0, 0.0); scales];
    for ch in 0..c {
        let mut a = x.data()[ch * plane..(ch + 1) * plane].to_vec();
        let mut b = y.data()[ch * plane..(ch + 1) * plane].to_vec();
        let (mut ph, mut pw) = (h, w);
        for (s, acc) in per_scale.iter_mut().enumerate() {
            let (ssim, cs) = ssim_plane(&a, &b, ph, pw);
            acc.0 += ssim / c as f64;
            acc.1 += cs / c as f64;
            if s + 1 < scales {
                let (na, nh, nw) = downsample(&a, ph, pw);
                let (nb, _, _) = downsample(&b, ph, pw);
                a = na;
                b = nb;
                ph = nh;
                pw = nw;
            }
        }
    }
    let mut value = 1.0;
    for (s, &(ssim, cs)) in per_scale.iter().enumerate() {
        let term = if s + 1 == scales { ssim } else { cs };
        value *= term.max(0.0).powf(weights[s] / wsum);
    }
    Ok(MsSsim { value, scales })
}

/// One attacked pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: usize,
    pub hamming: f64,
    pub l2_to_src: f64,
    pub l2_to_tgt: f64,
    pub msssim_to_src: f64,
    pub msssim_to_tgt: f64,
    pub collided: bool,
    pub iterations: usize,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Aggregates over the successful records only; absent when nothing
/// succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub asr: f64,
    pub successes: usize,
    pub total: usize,
    pub l2_to_src: Option<MeanStd>,
    pub l2_to_tgt: Option<MeanStd>,
    pub msssim_to_src: Option<MeanStd>,
    pub msssim_to_tgt: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<PairRecord>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn new(records: Vec<PairRecord>) -> Result<Self, MetricError> {
        let rate = asr(&records)?;
        let ok: Vec<&PairRecord> = records.iter().filter(|r| r.hamming == 0.0).collect();
        let col = |f: fn(&PairRecord) -> f64| MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let aggregates = Aggregates {
            asr: rate,
            successes: ok.len(),
            total: records.len(),
            l2_to_src: col(|r| r.l2_to_src),
            l2_to_tgt: col(|r| r.l2_to_tgt),
            msssim_to_src: col(|r| r.msssim_to_src),
            msssim_to_tgt: col(|r| r.msssim_to_tgt),
        };
        Ok(Self { records, aggregates })
    }

    /// One row per pair followed by a commented aggregate footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,hamming,l2_to_src,l2_to_tgt,msssim_to_src,msssim_to_tgt,collided,iterations\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.pair, r.hamming, r.l2_to_src, r.l2_to_tgt, r.msssim_to_src, r.msssim_to_tgt, r.collided, r.iterations
            ));
        }
        let a = &self.aggregates;
        let fmt = |m: &Option<MeanStd>| m.map_or("-".to_string(), |m| m.to_string());
        s.push_str(&format!(
            "# asr={} successes={}/{} l2_to_src={} l2_to_tgt={} msssim_to_src={} msssim_to_tgt={}\n",
            a.asr,
            a.successes,
            a.total,
            fmt(&a.l2_to_src),
            fmt(&a.l2_to_tgt),
            fmt(&a.msssim_to_src),
            fmt(&a.msssim_to_tgt)
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bs(bytes: &[u8]) -> Bitstream {
        Bitstream::from_bytes(bytes.to_vec())
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming_normalized(&bs(&[0xa5, 0x13]), &bs(&[0xa5, 0x13])), 0.0);
        // A complement never ends in the same final set bit, so the lengths
        // differ as well.
        assert_eq!(hamming_normalized(&bs(&[0b1010_1011]), &bs(&[0b0101_0100])), 1.0);
        assert_eq!(hamming_normalized(&bs(&[0xff]), &bs(&[0x00, 0x01])), 1.0);
        // Both streams end in a set bit at position 8.
        let a = bs(&[0b1011_0001]);
        let b = bs(&[0b1001_0001]);
        assert_eq!(a.bit_length(), 8);
        assert_eq!(hamming_normalized(&a, &b), 0.125);
    }

    fn record(h: f64) -> PairRecord {
        PairRecord {
            pair: 0,
            hamming: h,
            l2_to_src: 0.1,
            l2_to_tgt: 0.3,
            msssim_to_src: 0.8,
            msssim_to_tgt: 0.2,
            collided: h == 0.0,
            iterations: 1,
        }
    }

    #[test]
    fn asr_examples() {
        assert_eq!(asr(&[record(0.0), record(0.0)]).unwrap(), 1.0);
        assert_eq!(asr(&[record(0.5), record(1.0)]).unwrap(), 0.0);
        assert_eq!(
            asr(&[record(0.0), record(0.0), record(0.0), record(0.01)]).unwrap(),
            0.75
        );
        assert_eq!(asr(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn l2_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen()).unwrap();
        assert_eq!(l2_per_pixel(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 1.0).unwrap();
        assert!((l2_per_pixel(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let z = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen()).unwrap();
        let mut acc = 0.0;
        for i in 0..48 {
            acc += (x.data()[i] - z.data()[i]).powi(2);
        }
        assert!((l2_per_pixel(&x, &z).unwrap() - (acc / 48.0).sqrt()).abs() < 1e-12);
        assert!(l2_per_pixel(&x, &Tensor::zeros(&[1, 3, 4, 5])).is_err());
    }

    #[test]
    fn ms_ssim_orders_noise_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[1, 3, 64, 64], |i| {
            let (y, xx) = ((i / 64) % 64, i % 64);
            0.5 + 0.3 * ((y as f64 / 7.0).sin() * (xx as f64 / 5.0).cos())
        })
        .unwrap();
        let noisy = |s: f64, rng: &mut ChaCha8Rng| {
            let d: Vec<f64> = x
                .data()
                .iter()
                .map(|v| (v + s * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0))
                .collect();
            Tensor::new(x.shape(), d).unwrap()
        };
        let light = noisy(0.05, &mut rng);
        let heavy = noisy(0.6, &mut rng);
        let same = ms_ssim(&x, &x).unwrap();
        assert!((same.value - 1.0).abs() < 1e-12);
        assert_eq!(same.scales, 3);
        let l = ms_ssim(&x, &light).unwrap().value;
        let h = ms_ssim(&x, &heavy).unwrap().value;
        assert!(h < l && l < 1.0, "{h} {l}");
        let back = ms_ssim(&light, &x).unwrap().value;
        assert!((back - l).abs() < 1e-9);
        assert!(ms_ssim(&Tensor::zeros(&[1, 3, 8, 8]), &Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn report_aggregates_successes_only() {
        let r = MetricReport::new(vec![record(0.0), record(0.2)]).unwrap();
        assert_eq!(r.aggregates.asr, 0.5);
        assert_eq!(r.aggregates.successes, 1);
        assert_eq!(r.aggregates.l2_to_tgt.unwrap().mean, 0.3);
        let none = MetricReport::new(vec![record(0.3)]).unwrap();
        assert!(none.aggregates.l2_to_src.is_none());
        assert!(none.to_csv().contains("l2_to_src=-"));
        assert_eq!(r.to_csv().lines().count(), 4);
    }
}
