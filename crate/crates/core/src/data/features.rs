//! Binary feature files.
//!
//! Layout, little-endian: `b"CDTF"`, `u32` version (1), `u32` D, `u64` T,
//! then `T * D` `f32` values, time-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{SeqTensor, Tensor3};
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CDTF";
pub const FEATURE_VERSION: u32 = 1;

/// Writes the `(1, D, T)` tensor. Values are narrowed to f32.
pub fn write_features(w: &mut impl Write, features: &Tensor3) -> Result<()> {
    let [b, d, t] = features.dims();
    if b != 1 {
        return Err(Error::InvalidArgument(format!("feature files hold one video, got batch {b}")));
    }
    let mut buf = Vec::with_capacity(20 + 4 * d * t);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    for ti in 0..t {
        for di in 0..d {
            buf.extend_from_slice(&(features.get(0, di, ti) as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<SeqTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

pub fn parse_features(bytes: &[u8]) -> Result<SeqTensor> {
    if bytes.len() < 20 {
        return Err(Error::Format("feature file shorter than its header".into()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("bad feature file magic".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let d = u32_at(8) as usize;
    let t = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let t = usize::try_from(t).map_err(|_| Error::Format("time length overflows".into()))?;
    let expected = d
        .checked_mul(t)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("feature payload size overflows".into()))?;
    let payload = &bytes[20..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "feature payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    if d == 0 || t == 0 {
        return Err(Error::Format("empty feature matrix".into()));
    }
    let mut data = Tensor3::zeros([1, d, t]);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        data.set(0, i % d, i / d, f64::from(v));
    }
    Ok(SeqTensor::dense(data))
}

pub fn save_features(path: impl AsRef<Path>, features: &Tensor3) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features(&mut f, features)?;
    f.flush()?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<SeqTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_features(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
