//! Lossless conversion between a `C×H×W` map and its `[N, D]` token matrix.
//!
//! Token `i` is the `d×d` patch at grid cell `(i / G_w, i % G_w)`. Within a
//! token, values are laid out channel-major, then row-major inside the patch.

use alloc::format;
use alloc::vec;

use super::{Tensor, TokenGeometry};
use crate::error::{Error, Result};

pub fn unfold(input: &Tensor, d: usize) -> Result<Tensor> {
    let geom = TokenGeometry::new(input.feature_shape()?, d)?;
    let (c, h, w) = (geom.feature.c, geom.feature.h, geom.feature.w);
    let (n, dim, gw) = (geom.tokens(), geom.token_dim(), geom.grid_w());
    let x = input.data();
    let mut out = vec![0.0; n * dim];
    for t in 0..n {
        let (gy, gx) = (t / gw, t % gw);
        let tok = &mut out[t * dim..(t + 1) * dim];
        for ch in 0..c {
            for r in 0..d {
                let src = (ch * h + gy * d + r) * w + gx * d;
                let dst = (ch * d + r) * d;
                tok[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, dim], out))
}

/// Inverse of [`unfold`] for the given geometry.
pub fn fold(tokens: &Tensor, geom: &TokenGeometry) -> Result<Tensor> {
    let (n, dim) = match *tokens.shape() {
        [n, dim] => (n, dim),
        _ => return Err(Error::Geometry(format!("tokens must be a matrix, got {:?}", tokens.shape()))),
    };
    if n != geom.tokens() || dim != geom.token_dim() {
        return Err(Error::Geometry(format!(
            "{n}x{dim} tokens do not fold into {:?} with patch {}",
            geom.feature.dims(),
            geom.patch
        )));
    }
    let (c, h, w, d, gw) = (geom.feature.c, geom.feature.h, geom.feature.w, geom.patch, geom.grid_w());
    let p = tokens.data();
    let mut out = vec![0.0; c * h * w];
    for t in 0..n {
        let (gy, gx) = (t / gw, t % gw);
        let tok = &p[t * dim..(t + 1) * dim];
        for ch in 0..c {
            for r in 0..d {
                let dst = (ch * h + gy * d + r) * w + gx * d;
                let src = (ch * d + r) * d;
                out[dst..dst + d].copy_from_slice(&tok[src..src + d]);
            }
        }
    }
    Ok(Tensor::from_parts(geom.feature.dims().to_vec(), out))
}
