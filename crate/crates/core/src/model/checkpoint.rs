//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ACAD"            4 bytes magic
//! version           u32 (= 1)
//! config_len        u64
//! config            config_len bytes, ModelConfig as compact JSON
//! param_count       u64
//! repeated param_count times, in sorted-name order:
//!   name_len        u32
//!   name            name_len bytes UTF-8
//!   dims            3 x u32
//!   values          d0*d1*d2 x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ContextDet, ModelConfig};
use crate::autodiff::{ParamStore, Tensor3};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ACAD";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(w: &mut impl Write, model: &ContextDet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(model.config())?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    let params = model.params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, p) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in p.value.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))?;
    Ok(buf)
}

fn read_vec(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
    }
    Ok(buf)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ContextDet> {
    let magic = read_exact::<4>(r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = u64::from_le_bytes(read_exact(r, "config length")?) as usize;
    let cfg_bytes = read_vec(r, cfg_len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let count = u64::from_le_bytes(read_exact(r, "parameter count")?);
    let mut store = ParamStore::new();
    let decay: std::collections::HashMap<String, bool> = super::param_specs(&cfg)
        .into_iter()
        .map(|s| (s.name, s.decay))
        .collect();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(r, "name length")?) as usize;
        let name = String::from_utf8(read_vec(r, name_len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(read_exact(r, "dims")?) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let bytes = read_vec(r, n * 8, &name)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let d = decay.get(&name).copied().unwrap_or(true);
        store
            .insert(&name, Tensor3::from_vec(dims, values)?, d)
            .map_err(|_| Error::Format(format!("duplicate parameter {name}")))?;
    }
    ContextDet::from_params(cfg, store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ContextDet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ContextDet> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
