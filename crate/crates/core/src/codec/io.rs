//! Binary model files. The layout is documented in the repository README.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::entropy::{EntropyModel, ScaleTables};
use super::model::{Architecture, CodecModel, ModelConfig, QualityPreset};
use super::prior::{ChannelTable, FactorizedPrior};
use super::CodecError;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"NICM";
pub const MODEL_VERSION: u8 = 1;

const ENTROPY_NONE: u8 = 0;
const ENTROPY_FACTORIZED: u8 = 1;
const ENTROPY_HYPER: u8 = 2;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn table(&mut self, t: &ChannelTable) {
        self.i32(t.s_min());
        self.u32(t.freqs().len() as u32);
        for &f in t.freqs() {
            self.u32(f);
        }
    }
    fn prior(&mut self, p: &FactorizedPrior) {
        self.u32(p.num_channels() as u32);
        for t in p.channels() {
            self.table(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CodecError::BadModel("model file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn i32(&mut self) -> Result<i32, CodecError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// Reads a count and checks that at least `count * unit` bytes remain.
    fn count(&mut self, unit: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(unit) > self.bytes.len() - self.pos {
            return Err(CodecError::BadModel("count exceeds the file size".into()));
        }
        Ok(n)
    }
    fn table(&mut self) -> Result<ChannelTable, CodecError> {
        let s_min = self.i32()?;
        let n = self.count(4)?;
        let freqs = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        ChannelTable::new(s_min, freqs)
    }
    fn prior(&mut self) -> Result<FactorizedPrior, CodecError> {
        let n = self.count(8)?;
        let tables = (0..n).map(|_| self.table()).collect::<Result<Vec<_>, _>>()?;
        FactorizedPrior::new(tables)
    }
}

fn narrow(v: usize, what: &str) -> Result<u16, CodecError> {
    u16::try_from(v).map_err(|_| CodecError::BadModel(format!("{what} {v} does not fit the file format")))
}

pub fn model_to_bytes(model: &CodecModel) -> Result<Vec<u8>, CodecError> {
    let cfg = model.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MODEL_MAGIC);
    w.u8(MODEL_VERSION);
    w.u8(cfg.arch.code());
    w.u8(cfg.quality.qf);
    w.u8(0);
    w.u16(narrow(cfg.hidden, "hidden width")?);
    w.u16(narrow(cfg.quality.latent_channels, "latent channels")?);
    w.u16(narrow(cfg.hyper_hidden, "hyper hidden width")?);
    w.u16(narrow(cfg.hyper_latent, "hyper latent channels")?);
    w.f64(cfg.quality.step);
    w.f64(cfg.quality.lambda);
    w.u32(model.params().len() as u32);
    for (name, t) in model.params() {
        w.u16(narrow(name.len(), "parameter name length")?);
        w.0.extend_from_slice(name.as_bytes());
        w.u8(t.shape().len() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f32(v as f32);
        }
    }
    match model.entropy() {
        None => w.u8(ENTROPY_NONE),
        Some(EntropyModel::Factorized(p)) => {
            w.u8(ENTROPY_FACTORIZED);
            w.prior(p);
        }
        Some(EntropyModel::Hyper { hyper, scales }) => {
            w.u8(ENTROPY_HYPER);
            w.prior(hyper);
            w.u32(scales.thresholds().len() as u32);
            for &t in scales.thresholds() {
                w.f32(t);
            }
            for t in scales.tables() {
                w.table(t);
            }
        }
    }
    Ok(w.0)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<CodecModel, CodecError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(CodecError::BadModel("bad model magic".into()));
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(CodecError::BadModel(format!("unsupported model version {version}")));
    }
    let arch =
        Architecture::from_code(r.u8()?).ok_or_else(|| CodecError::BadModel("unknown architecture code".into()))?;
    let qf = r.u8()?;
    r.u8()?;
    let hidden = usize::from(r.u16()?);
    let latent = usize::from(r.u16()?);
    let hyper_hidden = usize::from(r.u16()?);
    let hyper_latent = usize::from(r.u16()?);
    let step = r.f64()?;
    let lambda = r.f64()?;
    if !(step > 0.0) || !step.is_finite() || !lambda.is_finite() || lambda < 0.0 {
        return Err(CodecError::BadModel("invalid step or lambda".into()));
    }
    let config = ModelConfig {
        arch,
        quality: QualityPreset {
            qf,
            lambda,
            latent_channels: latent,
            step,
        },
        hidden,
        hyper_hidden,
        hyper_latent,
    };
    let n = r.count(3)?;
    let mut params = BTreeMap::new();
    for _ in 0..n {
        let len = usize::from(r.u16()?);
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CodecError::BadModel("parameter name is not UTF-8".into()))?;
        let ndim = usize::from(r.u8()?);
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&m| m.saturating_mul(4) <= bytes.len())
            .ok_or_else(|| CodecError::BadModel(format!("{name} is larger than the file")))?;
        let data = (0..numel)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(&shape, data).map_err(|e| CodecError::BadModel(format!("{name}: {e}")))?;
        if params.insert(name.clone(), t).is_some() {
            return Err(CodecError::BadModel(format!("duplicate parameter {name}")));
        }
    }
    let entropy = match r.u8()? {
        ENTROPY_NONE => None,
        ENTROPY_FACTORIZED => Some(EntropyModel::Factorized(r.prior()?)),
        ENTROPY_HYPER => {
            let hyper = r.prior()?;
            let k = r.count(4)?;
            let thresholds = (0..k).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            let tables = (0..=k).map(|_| r.table()).collect::<Result<Vec<_>, _>>()?;
            Some(EntropyModel::Hyper {
                hyper,
                scales: ScaleTables::new(thresholds, tables)?,
            })
        }
        t => return Err(CodecError::BadModel(format!("unknown entropy model tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(CodecError::BadModel("trailing bytes after the model".into()));
    }
    CodecModel::from_parts(config, params, entropy)
}

pub fn save_model(model: &CodecModel, path: impl AsRef<Path>) -> Result<(), CodecError> {
    crate::imageio::write_atomic(path.as_ref(), &model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CodecModel, CodecError> {
    model_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_without_prior() {
        for arch in Architecture::ALL {
            let m = CodecModel::init(ModelConfig::new(arch, 2).unwrap(), 7).unwrap();
            let bytes = model_to_bytes(&m).unwrap();
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(model_to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_damaged_files() {
        let m = CodecModel::init(ModelConfig::new(Architecture::FpRelu, 1).unwrap(), 1).unwrap();
        let bytes = model_to_bytes(&m).unwrap();
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }
}
