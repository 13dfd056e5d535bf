//! Dataset file: magic `ERSD`, u32 version, u32 n, K, C, H, W, then per
//! sample the f64 image, a u16 label and a u8 truth mask of `H·W` bytes.

use std::path::Path;

use ersm_core::data::Sample;
use ersm_core::Tensor;

use crate::codec::{put_f64s, put_u32, Reader};
use crate::error::{CliError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"ERSD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

pub fn encode(ds: &Dataset) -> std::result::Result<Vec<u8>, String> {
    let (c, h, w) = (ds.channels, ds.height, ds.width);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, ds.samples.len(), "sample count")?;
    for (v, what) in [(ds.classes, "classes"), (c, "channels"), (h, "height"), (w, "width")] {
        put_u32(&mut out, v, what)?;
    }
    for (i, s) in ds.samples.iter().enumerate() {
        if s.image.shape() != [c, h, w] {
            return Err(format!("sample {i} has shape {:?}, header says {:?}", s.image.shape(), [c, h, w]));
        }
        if s.truth_mask.len() != h * w {
            return Err(format!("sample {i}: truth mask has {} entries", s.truth_mask.len()));
        }
        if s.label >= ds.classes {
            return Err(format!("sample {i}: label {} out of range", s.label));
        }
        put_f64s(&mut out, s.image.data());
        out.extend_from_slice(&(s.label as u16).to_le_bytes());
        out.extend_from_slice(&s.truth_mask);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err("not a dataset file (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format!("unsupported dataset version {version}"));
    }
    let n = r.u32("sample count")? as usize;
    let classes = r.u32("classes")? as usize;
    let channels = r.u32("channels")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    if classes > u16::MAX as usize + 1 {
        return Err(format!("{classes} classes cannot be labelled with 16 bits"));
    }
    let pixels = channels.checked_mul(height).and_then(|v| v.checked_mul(width)).ok_or("image size overflows")?;
    let record =
        pixels.checked_mul(8).and_then(|v| v.checked_add(2 + height * width)).ok_or("record size overflows")?;
    // Reject a bad count before allocating anything.
    if n.checked_mul(record) != Some(r.remaining()) {
        return Err(format!("{n} samples of {record} bytes do not match the {} payload bytes", r.remaining()));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let image = r.f64s(pixels, "image")?;
        let label = r.u16("label")? as usize;
        if label >= classes {
            return Err(format!("sample {i}: label {label} is not below {classes}"));
        }
        let mask = r.take(height * width, "truth mask")?.to_vec();
        if mask.iter().any(|&v| v > 1) {
            return Err(format!("sample {i}: truth mask holds values other than 0 and 1"));
        }
        let image = Tensor::new(&[channels, height, width], image).map_err(|e| format!("sample {i}: {e}"))?;
        samples.push(Sample { image, label, truth_mask: mask });
    }
    r.finish()?;
    Ok(Dataset { classes, channels, height, width, samples })
}

pub fn write(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = encode(ds).map_err(|detail| CliError::Format { path: path.into(), detail })?;
    fsio::write_atomic(path, &bytes)
}

pub fn read(path: &Path) -> Result<Dataset> {
    let bytes = fsio::read_all(path)?;
    decode(&bytes).map_err(|detail| CliError::Format { path: path.into(), detail })
}
