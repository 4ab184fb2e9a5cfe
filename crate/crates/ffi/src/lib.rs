//! C interface: load a model, compress and decompress images, compare
//! bitstreams and run the masked-gradient attack on one pair.
//!
//! Every function returns a [`NicStatus`]. On failure a message is kept per
//! thread and can be copied out with [`nic_last_error`]. Handles are opaque
//! and must be released with their `_free` function; passing null to a
//! `_free` function is a no-op.
//!
//! Images cross the boundary as `3 * height * width` doubles in `[0, 1]`,
//! channel-major (all red values, then green, then blue), rows top to
//! bottom.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nicollide::attack::{mgd_attack, AttackConfig, AttackError};
use nicollide::codec::io::load_model;
use nicollide::codec::{decompress, CodecError, CodecModel, Compressed};
use nicollide::defense::{LpdPolicy, Pipeline};
use nicollide::metrics::hamming_normalized;
use nicollide::tensor::Tensor;
use nicollide::theory;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadModel = 4,
    BadImage = 5,
    CorruptStream = 6,
    /// A latent fell outside the prior's symbol range.
    OutOfRange = 7,
    Numeric = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded codec model.
pub struct NicModel {
    inner: CodecModel,
}

/// A compressed image: header plus payload.
pub struct NicBitstream {
    inner: Compressed,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: NicStatus, msg: impl Into<String>) -> NicStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn codec_status(e: &CodecError) -> NicStatus {
    match e {
        CodecError::Io(_) => NicStatus::Io,
        CodecError::Corrupt(_) => NicStatus::CorruptStream,
        CodecError::SymbolOutOfRange { .. } => NicStatus::OutOfRange,
        CodecError::BadImage(_) => NicStatus::BadImage,
        CodecError::Divergence { .. } => NicStatus::Numeric,
        _ => NicStatus::BadModel,
    }
}

fn from_codec(e: CodecError) -> NicStatus {
    fail(codec_status(&e), e.to_string())
}

fn from_attack(e: AttackError) -> NicStatus {
    let status = match &e {
        AttackError::Config(_) => NicStatus::InvalidArgument,
        AttackError::NonFinite { .. } => NicStatus::Numeric,
        AttackError::Codec(c) => codec_status(c),
        AttackError::Io(_) => NicStatus::Io,
        _ => NicStatus::BadImage,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> NicStatus) -> NicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NicStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `pixels` must point to `3 * height * width` readable doubles.
unsafe fn image_from_raw(pixels: *const f64, height: usize, width: usize) -> Result<Tensor, NicStatus> {
    if pixels.is_null() {
        return Err(fail(NicStatus::NullPointer, "pixel pointer is null"));
    }
    let n = 3usize
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(NicStatus::InvalidArgument, "empty or oversized image"))?;
    let data = std::slice::from_raw_parts(pixels, n).to_vec();
    Tensor::new(&[1, 3, height, width], data).map_err(|e| fail(NicStatus::BadImage, e.to_string()))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nic_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a `.nicm` model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_model_load(path: *const c_char, out: *mut *mut NicModel) -> NicStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(NicStatus::NullPointer, "null argument");
        }
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(NicStatus::InvalidArgument, "path is not UTF-8");
        };
        match load_model(p) {
            Ok(m) if m.entropy().is_none() => fail(NicStatus::BadModel, "model has no fitted entropy model"),
            Ok(m) => {
                *out = Box::into_raw(Box::new(NicModel { inner: m }));
                NicStatus::Ok
            }
            Err(e) => from_codec(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`nic_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nic_model_free(model: *mut NicModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Quality preset (1 = lowest) of a model.
///
/// # Safety
/// `model` must be a live handle and `qf` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_model_quality(model: *const NicModel, qf: *mut u8) -> NicStatus {
    if model.is_null() || qf.is_null() {
        return fail(NicStatus::NullPointer, "null argument");
    }
    *qf = (*model).inner.quality().qf;
    NicStatus::Ok
}

/// Compresses an image. With `lpd` non-zero, analysis activations are
/// rounded to half precision.
///
/// # Safety
/// `model` must be a live handle, `pixels` must hold `3 * height * width`
/// doubles and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_compress(
    model: *const NicModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    lpd: u8,
    out: *mut *mut NicBitstream,
) -> NicStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(NicStatus::NullPointer, "null argument");
        }
        let img = match image_from_raw(pixels, height, width) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let policy = if lpd != 0 {
            LpdPolicy::default()
        } else {
            LpdPolicy::INACTIVE
        };
        match Pipeline::new(&(*model).inner, policy).compress(&img) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(NicBitstream { inner: c }));
                NicStatus::Ok
            }
            Err(e) => from_codec(e),
        }
    })
}

/// Reconstructs an image into `pixels`, which must have room for
/// `3 * height * width` doubles of the stream's header dimensions.
/// `height` and `width` receive the dimensions in every case, so a call
/// with `cap = 0` queries the size.
///
/// # Safety
/// `model` and `stream` must be live handles, `pixels` must be null or
/// point to `cap` writable doubles, `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn nic_decompress(
    model: *const NicModel,
    stream: *const NicBitstream,
    pixels: *mut f64,
    cap: usize,
    height: *mut usize,
    width: *mut usize,
) -> NicStatus {
    guard(|| {
        if model.is_null() || stream.is_null() || height.is_null() || width.is_null() {
            return fail(NicStatus::NullPointer, "null argument");
        }
        let header = (*stream).inner.header;
        *height = usize::from(header.height);
        *width = usize::from(header.width);
        let need = 3 * *height * *width;
        if pixels.is_null() || cap < need {
            return fail(NicStatus::BufferTooSmall, format!("need {need} doubles"));
        }
        match decompress(&(*model).inner, &(*stream).inner) {
            Ok(t) => {
                ptr::copy_nonoverlapping(t.data().as_ptr(), pixels, need);
                NicStatus::Ok
            }
            Err(e) => from_codec(e),
        }
    })
}

/// Serialized `.nicb` length in bytes.
///
/// # Safety
/// `stream` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nic_bitstream_size(stream: *const NicBitstream) -> usize {
    if stream.is_null() {
        return 0;
    }
    (*stream).inner.to_bytes().len()
}

/// Payload length in bits (up to and including the last set bit).
///
/// # Safety
/// `stream` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nic_bitstream_bits(stream: *const NicBitstream) -> u64 {
    if stream.is_null() {
        return 0;
    }
    (*stream).inner.payload.bit_length()
}

/// Writes the `.nicb` serialization into `buf`.
///
/// # Safety
/// `stream` must be a live handle, `buf` must point to `cap` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn nic_bitstream_write(stream: *const NicBitstream, buf: *mut u8, cap: usize) -> NicStatus {
    if stream.is_null() || buf.is_null() {
        return fail(NicStatus::NullPointer, "null argument");
    }
    let bytes = (*stream).inner.to_bytes();
    if cap < bytes.len() {
        return fail(NicStatus::BufferTooSmall, format!("need {} bytes", bytes.len()));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    NicStatus::Ok
}

/// Parses a `.nicb` serialization.
///
/// # Safety
/// `buf` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_bitstream_read(buf: *const u8, len: usize, out: *mut *mut NicBitstream) -> NicStatus {
    guard(|| {
        if buf.is_null() || out.is_null() {
            return fail(NicStatus::NullPointer, "null argument");
        }
        match Compressed::from_bytes(std::slice::from_raw_parts(buf, len)) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(NicBitstream { inner: c }));
                NicStatus::Ok
            }
            Err(e) => from_codec(e),
        }
    })
}

/// # Safety
/// `stream` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nic_bitstream_free(stream: *mut NicBitstream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Normalized Hamming distance of two payloads; 0 means a collision.
///
/// # Safety
/// `a` and `b` must be live handles, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_bitstream_hamming(
    a: *const NicBitstream,
    b: *const NicBitstream,
    out: *mut f64,
) -> NicStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        return fail(NicStatus::NullPointer, "null argument");
    }
    *out = hamming_normalized(&(*a).inner.payload, &(*b).inner.payload);
    NicStatus::Ok
}

/// Runs the masked-gradient attack with default settings except the
/// iteration budget (`0` keeps the default). The final iterate is written
/// to `adv` (same layout and size as the inputs) and `collided` receives 1
/// when its bitstream equals the target's.
///
/// # Safety
/// `model` must be a live handle; `src`, `tgt` and `adv` must each hold
/// `3 * height * width` doubles; `collided` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_attack_mgd(
    model: *const NicModel,
    src: *const f64,
    tgt: *const f64,
    height: usize,
    width: usize,
    max_iterations: usize,
    adv: *mut f64,
    collided: *mut u8,
) -> NicStatus {
    guard(|| {
        if model.is_null() || adv.is_null() || collided.is_null() {
            return fail(NicStatus::NullPointer, "null argument");
        }
        let (x_src, x_tgt) = match (image_from_raw(src, height, width), image_from_raw(tgt, height, width)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let mut cfg = AttackConfig::default();
        if max_iterations > 0 {
            cfg.max_iterations = max_iterations;
        }
        match mgd_attack(&(*model).inner, &x_src, &x_tgt, &cfg) {
            Ok(run) => {
                ptr::copy_nonoverlapping(run.x_adv.data().as_ptr(), adv, run.x_adv.numel());
                *collided = u8::from(run.collided);
                NicStatus::Ok
            }
            Err(e) => from_attack(e),
        }
    })
}

/// Compression ratio of the thresholded orthogonal codec at `gamma`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_compression_ratio(gamma: f64, out: *mut f64) -> NicStatus {
    if out.is_null() {
        return fail(NicStatus::NullPointer, "null argument");
    }
    match theory::compression_ratio(gamma) {
        Ok(r) => {
            *out = r;
            NicStatus::Ok
        }
        Err(e) => fail(NicStatus::InvalidArgument, e.to_string()),
    }
}

/// Collision distance of the thresholded orthogonal codec at `gamma`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nic_collision_distance(gamma: f64, out: *mut f64) -> NicStatus {
    if out.is_null() {
        return fail(NicStatus::NullPointer, "null argument");
    }
    match theory::collision_distance_conventional(gamma) {
        Ok(d) => {
            *out = d;
            NicStatus::Ok
        }
        Err(e) => fail(NicStatus::InvalidArgument, e.to_string()),
    }
}
