//! Coded payloads and the `.nicb` container.
//!
//! A `.nicb` file is an 8-byte header followed by the range-coder payload:
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 2    | magic `b"NB"`                 |
//! | 2      | 1    | container version (1)         |
//! | 3      | 1    | quality factor                |
//! | 4      | 2    | image height, little-endian   |
//! | 6      | 2    | image width, little-endian    |
//! | 8      | ..   | payload bytes                 |
//!
//! Only the payload takes part in collision comparisons.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CodecError;

pub const NICB_MAGIC: [u8; 2] = *b"NB";
pub const NICB_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;

/// Payload bytes plus the exact number of significant bits.
///
/// The last payload byte is never zero and its bits past `bit_length` are
/// zero, so `bit_length` is determined by the bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Bitstream {
    bytes: Vec<u8>,
    bit_length: u64,
}

impl Bitstream {
    /// Wraps coder output, dropping trailing zero bytes.
    pub fn from_bytes(mut bytes: Vec<u8>) -> Self {
        while bytes.last() == Some(&0) {
            bytes.pop();
        }
        let bit_length = match bytes.last() {
            None => 0,
            Some(&b) => 8 * bytes.len() as u64 - u64::from(b.trailing_zeros()),
        };
        Self { bytes, bit_length }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_length(&self) -> u64 {
        self.bit_length
    }

    /// Bit `n` counting from the most significant bit of the first byte.
    pub fn bit(&self, n: u64) -> bool {
        let byte = self.bytes[(n / 8) as usize];
        (byte >> (7 - (n % 8))) & 1 == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Header {
    pub qf: u8,
    pub height: u16,
    pub width: u16,
}

/// Header plus payload, as produced by `compress`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Compressed {
    pub header: Header,
    pub payload: Bitstream,
}

impl Compressed {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.bytes.len());
        out.extend_from_slice(&NICB_MAGIC);
        out.push(NICB_VERSION);
        out.push(self.header.qf);
        out.extend_from_slice(&self.header.height.to_le_bytes());
        out.extend_from_slice(&self.header.width.to_le_bytes());
        out.extend_from_slice(&self.payload.bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Corrupt("nicb file shorter than its header".into()));
        }
        if bytes[0..2] != NICB_MAGIC {
            return Err(CodecError::Corrupt("bad nicb magic".into()));
        }
        if bytes[2] != NICB_VERSION {
            return Err(CodecError::Corrupt(format!("unsupported nicb version {}", bytes[2])));
        }
        let payload = bytes[HEADER_LEN..].to_vec();
        if payload.last() == Some(&0) {
            return Err(CodecError::Corrupt("nicb payload has trailing zero bytes".into()));
        }
        Ok(Self {
            header: Header {
                qf: bytes[3],
                height: u16::from_le_bytes([bytes[4], bytes[5]]),
                width: u16::from_le_bytes([bytes[6], bytes[7]]),
            },
            payload: Bitstream::from_bytes(payload),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        crate::imageio::write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_length_tracks_last_set_bit() {
        let b = Bitstream::from_bytes(vec![0b1011_0000, 0x00]);
        assert_eq!(b.bytes(), &[0b1011_0000]);
        assert_eq!(b.bit_length(), 4);
        assert!(b.bit(0) && !b.bit(1) && b.bit(3));
        assert_eq!(Bitstream::from_bytes(vec![]).bit_length(), 0);
        assert_eq!(Bitstream::from_bytes(vec![1, 1]).bit_length(), 16);
    }

    #[test]
    fn container_roundtrip_preserves_header() {
        let c = Compressed {
            header: Header {
                qf: 3,
                height: 64,
                width: 96,
            },
            payload: Bitstream::from_bytes(vec![9, 8, 7]),
        };
        let back = Compressed::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.header.height, 64);
        assert_eq!(back.header.width, 96);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        assert!(Compressed::from_bytes(b"NB").is_err());
        assert!(Compressed::from_bytes(b"XX\x01\x01\x40\x00\x40\x00").is_err());
        assert!(Compressed::from_bytes(b"NB\x01\x01\x40\x00\x40\x00\x05\x00").is_err());
    }
}
