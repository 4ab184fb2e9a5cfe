//! Static factorized prior: one integer frequency table per latent channel.

use serde::{Deserialize, Serialize};

use super::bitstream::Bitstream;
use super::quant::Symbols;
use super::rangecoder::{RangeDecoder, RangeEncoder, TOTAL};
use super::CodecError;

/// Frequency table over the closed symbol range `[s_min, s_min + len - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelTable {
    s_min: i32,
    freqs: Vec<u32>,
    cdf: Vec<u32>,
}

impl ChannelTable {
    pub fn new(s_min: i32, freqs: Vec<u32>) -> Result<Self, CodecError> {
        if freqs.is_empty() {
            return Err(CodecError::Prior("empty frequency table".into()));
        }
        if freqs.iter().any(|&f| f == 0) {
            return Err(CodecError::Prior("every symbol needs a non-zero frequency".into()));
        }
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for &f in &freqs {
            acc = acc
                .checked_add(f)
                .ok_or_else(|| CodecError::Prior("frequency overflow".into()))?;
            cdf.push(acc);
        }
        if acc != TOTAL {
            return Err(CodecError::Prior(format!("frequencies sum to {acc}, expected {TOTAL}")));
        }
        Ok(Self { s_min, freqs, cdf })
    }

    /// Add-one smoothed table from symbol counts over `[s_min, ..]`.
    pub fn from_counts(s_min: i32, counts: &[u64]) -> Result<Self, CodecError> {
        let n = counts.len();
        if n == 0 || n as u64 > u64::from(TOTAL) / 2 {
            return Err(CodecError::Prior(format!("cannot build a table over {n} symbols")));
        }
        let denom: u64 = counts.iter().map(|c| c + 1).sum();
        let mut freqs: Vec<u32> = counts
            .iter()
            .map(|&c| (((c + 1) * u64::from(TOTAL)) / denom).max(1) as u32)
            .collect();
        let sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
        // Hand the rounding residue to the most frequent symbol.
        let top = (0..n).fold(0, |best, i| if freqs[i] > freqs[best] { i } else { best });
        let adjusted = i64::from(freqs[top]) + i64::from(TOTAL) - sum;
        if adjusted < 1 {
            return Err(CodecError::Prior("degenerate frequency table".into()));
        }
        freqs[top] = adjusted as u32;
        Self::new(s_min, freqs)
    }

    pub fn s_min(&self) -> i32 {
        self.s_min
    }

    pub fn s_max(&self) -> i32 {
        self.s_min + self.freqs.len() as i32 - 1
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn probability(&self, symbol: i32) -> Option<f64> {
        self.index(symbol).map(|i| f64::from(self.freqs[i]) / f64::from(TOTAL))
    }

    fn index(&self, symbol: i32) -> Option<usize> {
        let i = i64::from(symbol) - i64::from(self.s_min);
        (i >= 0 && (i as usize) < self.freqs.len()).then_some(i as usize)
    }

    /// Shannon entropy of the table in bits.
    pub fn entropy(&self) -> f64 {
        self.freqs
            .iter()
            .map(|&f| {
                let p = f64::from(f) / f64::from(TOTAL);
                -p * p.log2()
            })
            .sum()
    }
}

/// Independent per-channel distributions for a `(C, H, W)` symbol tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorizedPrior {
    channels: Vec<ChannelTable>,
}

impl FactorizedPrior {
    pub fn new(channels: Vec<ChannelTable>) -> Result<Self, CodecError> {
        if channels.is_empty() {
            return Err(CodecError::Prior("prior without channels".into()));
        }
        Ok(Self { channels })
    }

    /// Same table for every channel.
    pub fn uniform_channels(table: ChannelTable, channels: usize) -> Result<Self, CodecError> {
        Self::new(vec![table; channels])
    }

    /// Fits per-channel tables to observed symbols. `samples` are symbol
    /// tensors laid out channel-major with `channels` equal planes. The range
    /// of each channel is the observed range widened by `margin` on both
    /// sides.
    pub fn fit(samples: &[Symbols], channels: usize, margin: i32) -> Result<Self, CodecError> {
        if samples.is_empty() {
            return Err(CodecError::Prior("cannot fit a prior to an empty dataset".into()));
        }
        let mut lo = vec![i32::MAX; channels];
        let mut hi = vec![i32::MIN; channels];
        for s in samples {
            let plane = plane_len(s.values().len(), channels)?;
            for (i, &v) in s.values().iter().enumerate() {
                let c = i / plane;
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let mut counts: Vec<Vec<u64>> = (0..channels)
            .map(|c| vec![0; (hi[c] - lo[c] + 1 + 2 * margin) as usize])
            .collect();
        for s in samples {
            let plane = plane_len(s.values().len(), channels)?;
            for (i, &v) in s.values().iter().enumerate() {
                let c = i / plane;
                counts[c][(v - lo[c] + margin) as usize] += 1;
            }
        }
        let tables = counts
            .iter()
            .enumerate()
            .map(|(c, cnt)| ChannelTable::from_counts(lo[c] - margin, cnt))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(tables)
    }

    pub fn channels(&self) -> &[ChannelTable] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Checks every symbol lies in its channel's range.
    pub fn check_range(&self, symbols: &Symbols) -> Result<(), CodecError> {
        let plane = plane_len(symbols.values().len(), self.channels.len())?;
        for (i, &v) in symbols.values().iter().enumerate() {
            let t = &self.channels[i / plane];
            if t.index(v).is_none() {
                return Err(CodecError::SymbolOutOfRange {
                    symbol: v,
                    channel: i / plane,
                    min: t.s_min(),
                    max: t.s_max(),
                });
            }
        }
        Ok(())
    }

    /// Ideal code length `sum(-log2 p(s))` in bits.
    pub fn ideal_bits(&self, symbols: &Symbols) -> Result<f64, CodecError> {
        self.check_range(symbols)?;
        let plane = plane_len(symbols.values().len(), self.channels.len())?;
        Ok(symbols
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| -self.channels[i / plane].probability(v).unwrap_or(1.0).log2())
            .sum())
    }

    pub(crate) fn encode_into(&self, enc: &mut RangeEncoder, symbols: &Symbols) -> Result<(), CodecError> {
        self.check_range(symbols)?;
        let plane = plane_len(symbols.values().len(), self.channels.len())?;
        for (i, &v) in symbols.values().iter().enumerate() {
            let t = &self.channels[i / plane];
            let k = (v - t.s_min) as usize;
            enc.encode(t.cdf[k], t.freqs[k]);
        }
        Ok(())
    }

    pub(crate) fn decode_from(&self, dec: &mut RangeDecoder<'_>, count: usize) -> Result<Vec<i32>, CodecError> {
        let plane = plane_len(count, self.channels.len())?;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let t = &self.channels[i / plane];
            let v = dec.peek()?;
            let k = t.cdf.partition_point(|&c| c <= v) - 1;
            dec.consume(t.cdf[k], t.freqs[k])?;
            out.push(t.s_min + k as i32);
        }
        Ok(out)
    }
}

fn plane_len(count: usize, channels: usize) -> Result<usize, CodecError> {
    if count == 0 {
        return Ok(1);
    }
    if channels == 0 || count % channels != 0 {
        return Err(CodecError::Prior(format!(
            "{count} symbols do not split into {channels} channels"
        )));
    }
    Ok(count / channels)
}

/// Range-codes `symbols` under `prior`.
pub fn entropy_encode(prior: &FactorizedPrior, symbols: &Symbols) -> Result<Bitstream, CodecError> {
    let mut enc = RangeEncoder::new();
    prior.encode_into(&mut enc, symbols)?;
    Ok(enc.finish())
}

/// Decodes `count` symbols. Decoding with a different prior than the one
/// used for encoding either fails or yields unspecified symbols, but always
/// terminates.
pub fn entropy_decode(prior: &FactorizedPrior, b: &Bitstream, count: usize) -> Result<Symbols, CodecError> {
    let mut dec = RangeDecoder::new(b.bytes());
    let values = prior.decode_from(&mut dec, count)?;
    if dec.consumed() < b.bytes().len() {
        return Err(CodecError::Corrupt("unused bytes after the last symbol".into()));
    }
    Symbols::new(vec![count], values)
}
