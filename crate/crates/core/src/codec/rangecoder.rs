//! 32-bit multi-symbol range coder over 16-bit frequency tables.
//!
//! The coding loop is integer-only. The encoder propagates carries back
//! into already emitted bytes; at the end it picks the value inside the
//! final interval with the most trailing zero bits and drops trailing zero
//! bytes, since the decoder reads zeros past the end of the stream.

use super::bitstream::Bitstream;
use super::CodecError;

/// Log2 of the frequency total every table must sum to.
pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;

const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encodes the symbol occupying `[cum, cum + freq)` of [`TOTAL`].
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        if self.low >> 32 != 0 {
            self.propagate_carry();
            self.low &= 0xffff_ffff;
        }
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & 0xffff_ffff;
            self.range <<= 8;
        }
    }

    fn propagate_carry(&mut self) {
        for byte in self.out.iter_mut().rev() {
            if *byte == 0xff {
                *byte = 0;
            } else {
                *byte += 1;
                return;
            }
        }
        unreachable!("carry out of the range coder's unit interval");
    }

    pub fn finish(mut self) -> Bitstream {
        // Value in [low, low + range) with the most trailing zeros.
        let low = self.low;
        let high = low + u64::from(self.range);
        let mut value = low;
        for bits in (0..=32).rev() {
            let mask = (1u64 << bits) - 1;
            let candidate = (low + mask) & !mask;
            if candidate < high {
                value = candidate;
                break;
            }
        }
        if value >> 32 != 0 {
            self.propagate_carry();
            value &= 0xffff_ffff;
        }
        self.out.extend_from_slice(&(value as u32).to_be_bytes());
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        Bitstream::from_bytes(self.out)
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    r: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = Self {
            bytes,
            pos: 0,
            code: 0,
            range: u32::MAX,
            r: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Position within `[0, TOTAL)` of the next symbol. Must be followed by
    /// [`RangeDecoder::consume`].
    pub fn peek(&mut self) -> Result<u32, CodecError> {
        self.r = self.range >> PRECISION_BITS;
        let v = self.code / self.r;
        if v >= TOTAL {
            return Err(CodecError::Corrupt("range decoder left the coded interval".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<(), CodecError> {
        let start = self.r * cum;
        let size = self.r * freq;
        if self.code < start || self.code - start >= size {
            return Err(CodecError::Corrupt("symbol does not match decoder state".into()));
        }
        self.code -= start;
        self.range = size;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.range <<= 8;
        }
        Ok(())
    }

    /// Bytes of the stream the decoder has actually looked at.
    pub fn consumed(&self) -> usize {
        self.pos.min(self.bytes.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(freqs: &[u32]) -> Vec<u32> {
        let mut cdf = vec![0];
        for f in freqs {
            cdf.push(cdf.last().unwrap() + f);
        }
        assert_eq!(*cdf.last().unwrap(), TOTAL);
        cdf
    }

    fn roundtrip(freqs: &[u32], symbols: &[usize]) -> Bitstream {
        let cdf = table(freqs);
        let mut enc = RangeEncoder::new();
        for &s in symbols {
            enc.encode(cdf[s], freqs[s]);
        }
        let b = enc.finish();
        let mut dec = RangeDecoder::new(b.bytes());
        for &s in symbols {
            let v = dec.peek().unwrap();
            let got = cdf.partition_point(|&c| c <= v) - 1;
            assert_eq!(got, s);
            dec.consume(cdf[got], freqs[got]).unwrap();
        }
        b
    }

    #[test]
    fn empty_message_is_empty() {
        let b = RangeEncoder::new().finish();
        assert!(b.bytes().is_empty());
        assert_eq!(b.bit_length(), 0);
    }

    #[test]
    fn skewed_tables_roundtrip() {
        let freqs = [1, 65_533, 1, 1];
        let syms: Vec<usize> = (0..5000).map(|i| if i % 97 == 0 { i % 4 } else { 1 }).collect();
        roundtrip(&freqs, &syms);
        let uniform = [16_384; 4];
        let syms: Vec<usize> = (0..3000).map(|i| (i * 7 + i / 3) % 4).collect();
        let b = roundtrip(&uniform, &syms);
        // 2 bits per symbol, plus at most a few bytes of flush.
        assert!(b.bytes().len() <= 750 + 4, "{}", b.bytes().len());
    }

    #[test]
    fn carries_propagate_through_ff_runs() {
        // Always coding the top symbol pushes `low` upward and forces carries.
        let freqs = [65_535, 1];
        let syms: Vec<usize> = (0..2000).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
        roundtrip(&freqs, &syms);
        let syms: Vec<usize> = vec![1; 300];
        roundtrip(&freqs, &syms);
    }
}
