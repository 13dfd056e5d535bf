//! 8-bit binary greymaps (P5).

use std::path::Path;

use ersm_core::energy_mask::upsample_bilinear;

use crate::error::{CliError, Result};
use crate::fsio;

/// P5 bytes for a `height×width` image of values in `[0, 1]`, stored as
/// `round(255·v)`.
pub fn encode(values: &[f64], height: usize, width: usize) -> std::result::Result<Vec<u8>, String> {
    if values.len() != height * width {
        return Err(format!("{} values for a {height}x{width} image", values.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

/// Parses a P5 file into `(width, height, pixels)`.
pub fn decode(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?.to_string());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let pixels = bytes.get(pos + 1..).unwrap_or(&[]);
    if pixels.len() != w * h {
        return Err(format!("expected {} pixels, found {}", w * h, pixels.len()));
    }
    Ok((w, h, pixels.to_vec()))
}

/// Upsamples a `grid_h×grid_w` keep-probability map to the input size and
/// writes it as P5.
pub fn write_mask(path: &Path, m: &[f64], grid: (usize, usize), size: (usize, usize)) -> Result<()> {
    let up = upsample_bilinear(m, grid.0, grid.1, size.0, size.1)?;
    let bytes = encode(&up, size.0, size.1).map_err(|detail| CliError::Format { path: path.into(), detail })?;
    fsio::write_atomic(path, &bytes)
}
