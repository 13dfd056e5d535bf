//! Parameter file: magic `ERSM`, u32 version, u32 entry count, then per
//! entry a u16 name length, the name, a u8 rank, u32 dims and f64 values.
//! All integers and floats are little-endian.

use std::path::Path;

use ersm_core::model::{ModelConfig, ModelParams};
use ersm_core::Tensor;

use crate::codec::{put_f64s, put_u32, Reader};
use crate::error::{CliError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"ERSM";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> std::result::Result<Vec<u8>, String> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, tensors.len(), "entry count")?;
    for (name, shape, data) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| format!("parameter name {name} is too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(shape.len()).map_err(|_| format!("{name} has rank {}", shape.len()))?;
        out.push(rank);
        for d in &shape {
            put_u32(&mut out, *d, "dimension")?;
        }
        put_f64s(&mut out, data);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err("not a parameter file (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported parameter file version {version}"));
    }
    let count = r.u32("entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name =
            std::str::from_utf8(r.take(len, "name")?).map_err(|_| format!("entry {i}: name is not UTF-8"))?.to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| format!("{name}: element count overflows"))?;
            shape.push(d);
        }
        let data = r.f64s(numel, &name)?;
        let t = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn write(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = encode(params).map_err(|detail| CliError::Format { path: path.into(), detail })?;
    fsio::write_atomic(path, &bytes)
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fsio::read_all(path)?;
    decode(&bytes).map_err(|detail| CliError::Format { path: path.into(), detail })
}

/// Reads a parameter file and checks it against `config`.
pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let tensors = read(path)?;
    ModelParams::from_tensors(config, tensors).map_err(|e| CliError::Mismatch(e.to_string()))
}
