//! Binary PPM images, raw tensor files and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn skip_ws_and_comments(b: &[u8], mut i: usize) -> usize {
    loop {
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < b.len() && b[i] == b'#' {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

fn header_number(b: &[u8], i: &mut usize) -> Result<usize, ImageError> {
    *i = skip_ws_and_comments(b, *i);
    let start = *i;
    while *i < b.len() && b[*i].is_ascii_digit() {
        *i += 1;
    }
    std::str::from_utf8(&b[start..*i])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::Format("malformed PPM header".into()))
}

/// Decodes a binary 8-bit PPM into a `(1,3,H,W)` tensor scaled to `[0,1]`.
pub fn decode_ppm(b: &[u8]) -> Result<Tensor, ImageError> {
    if b.len() < 2 || &b[..2] != b"P6" {
        return Err(ImageError::Format("not a binary (P6) PPM".into()));
    }
    let mut i = 2;
    let w = header_number(b, &mut i)?;
    let h = header_number(b, &mut i)?;
    let maxval = header_number(b, &mut i)?;
    if maxval != 255 {
        return Err(ImageError::Format(format!(
            "only 8-bit PPM is supported, maxval {maxval}"
        )));
    }
    if i >= b.len() || !b[i].is_ascii_whitespace() {
        return Err(ImageError::Format("missing whitespace after PPM header".into()));
    }
    i += 1;
    let n = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| ImageError::Format("PPM dimensions overflow".into()))?;
    if w == 0 || h == 0 || b.len() - i < n {
        return Err(ImageError::Format("PPM pixel data is truncated".into()));
    }
    let px = &b[i..i + n];
    let plane = w * h;
    let mut data = vec![0.0; n];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = f64::from(px[p * 3 + c]) / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).map_err(|e| ImageError::Format(e.to_string()))
}

/// Encodes a `(1,3,H,W)` tensor as an 8-bit PPM, clamping to `[0,1]` and
/// rounding to the nearest level.
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>, ImageError> {
    let (n, c, h, w) = t.dims4().map_err(|e| ImageError::Format(e.to_string()))?;
    if n != 1 || c != 3 {
        return Err(ImageError::Format(format!("cannot write shape {:?} as PPM", t.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    for p in 0..plane {
        for ch in 0..3 {
            let v = t.data()[ch * plane + p].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor, ImageError> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, t: &Tensor) -> Result<(), ImageError> {
    write_atomic(path.as_ref(), &encode_ppm(t)?)?;
    Ok(())
}

const RAW_MAGIC: [u8; 4] = *b"NICT";

/// Lossless tensor file: magic, rank (u32), extents (u32 each), values as
/// little-endian `f64`.
pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(b: &[u8]) -> Result<Tensor, ImageError> {
    let bad = || ImageError::Format("malformed raw tensor file".into());
    if b.len() < 8 || b[..4] != RAW_MAGIC {
        return Err(bad());
    }
    let rank = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes")) as usize;
    let body = 8 + 4 * rank;
    if rank > 8 || b.len() < body {
        return Err(bad());
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u32::from_le_bytes(b[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if b.len() != body + 8 * n {
        return Err(bad());
    }
    let data = b[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| ImageError::Format(e.to_string()))
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Tensor, ImageError> {
    decode_raw(&fs::read(path)?)
}

pub fn write_raw(path: impl AsRef<Path>, t: &Tensor) -> Result<(), ImageError> {
    write_atomic(path.as_ref(), &encode_raw(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_on_8bit_levels() {
        let t = Tensor::from_fn(&[1, 3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0).unwrap();
        let back = decode_ppm(&encode_ppm(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut b = b"P6 # comment\n1 1\n255\n".to_vec();
        b.extend_from_slice(&[255, 0, 51]);
        let t = decode_ppm(&b).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn raw_files_are_lossless() {
        let t = Tensor::new(&[1, 1, 1, 3], vec![0.1, 1.0 / 3.0, 0.999_999_999]).unwrap();
        assert_eq!(decode_raw(&encode_raw(&t)).unwrap(), t);
        assert!(decode_raw(b"NICT").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
