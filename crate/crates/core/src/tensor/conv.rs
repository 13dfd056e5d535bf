use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::elementwise::matmul_into;
use super::{FeatureShape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Gradients of a convolution with respect to each of its operands.
#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    input: FeatureShape,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvDims {
    fn patch_len(&self) -> usize {
        self.input.c * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_dims(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let fs = input.feature_shape()?;
    let [out_c, in_c, kh, kw] = match *kernels.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(shape_err("conv2d", format!("kernels must be rank 4, got {:?}", kernels.shape()))),
    };
    if kh != kw {
        return Err(shape_err("conv2d", format!("kernels must be square, got {kh}x{kw}")));
    }
    if in_c != fs.c {
        return Err(shape_err("conv2d", format!("kernels expect {in_c} channels, input has {}", fs.c)));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
    }
    if kh > fs.h + 2 * pad || kw > fs.w + 2 * pad {
        return Err(shape_err("conv2d", format!("kernel {kh} larger than padded input {}x{}", fs.h, fs.w)));
    }
    Ok(ConvDims {
        input: fs,
        out_c,
        k: kh,
        stride,
        pad,
        out_h: (fs.h + 2 * pad - kh) / stride + 1,
        out_w: (fs.w + 2 * pad - kw) / stride + 1,
    })
}

/// Lays out every receptive field of a zero-padded `C×H×W` input as a column:
/// the result is `[C·k·k, H'·W']`, rows ordered channel, kernel row, kernel column.
pub fn im2col(input: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let fs = input.feature_shape()?;
    let probe = Tensor::zeros(&[1, fs.c, k.max(1), k.max(1)]);
    let dims = conv_dims(input, &probe, stride, pad)?;
    Ok(Tensor::from_parts(vec![dims.patch_len(), dims.out_area()], im2col_raw(input.data(), &dims)))
}

fn im2col_raw(x: &[f64], dims: &ConvDims) -> Vec<f64> {
    let FeatureShape { c, h, w } = dims.input;
    let (k, area) = (dims.k, dims.out_area());
    let mut cols = vec![0.0; dims.patch_len() * area];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..dims.out_h {
                    let iy = (oy * dims.stride + ki) as isize - dims.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..dims.out_w {
                        let ix = (ox * dims.stride + kj) as isize - dims.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * dims.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`]: overlapping contributions are summed.
pub fn col2im(cols: &Tensor, input: FeatureShape, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let probe_in = Tensor::zeros(&input.dims());
    let probe_k = Tensor::zeros(&[1, input.c, k.max(1), k.max(1)]);
    let dims = conv_dims(&probe_in, &probe_k, stride, pad)?;
    if cols.shape() != [dims.patch_len(), dims.out_area()] {
        return Err(shape_err("col2im", format!("columns {:?} do not match geometry", cols.shape())));
    }
    Ok(Tensor::from_parts(input.dims().to_vec(), col2im_raw(cols.data(), &dims)))
}

fn col2im_raw(cols: &[f64], dims: &ConvDims) -> Vec<f64> {
    let FeatureShape { c, h, w } = dims.input;
    let (k, area) = (dims.k, dims.out_area());
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..dims.out_h {
                    let iy = (oy * dims.stride + ki) as isize - dims.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..dims.out_w {
                        let ix = (ox * dims.stride + kj) as isize - dims.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ch * h + iy as usize) * w + ix as usize] += src[oy * dims.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation with zero padding.
///
/// `input: [C_in,H,W]`, `kernels: [C_out,C_in,k,k]`, `bias: [C_out]` →
/// `[C_out, (H+2p−k)/s+1, (W+2p−k)/s+1]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let dims = conv_dims(input, kernels, stride, pad)?;
    if bias.rank() != 1 || bias.len() != dims.out_c {
        return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", bias.shape(), dims.out_c)));
    }
    let cols = im2col_raw(input.data(), &dims);
    let area = dims.out_area();
    let mut out = vec![0.0; dims.out_c * area];
    for (row, &b) in out.chunks_exact_mut(area).zip(bias.data()) {
        row.fill(b);
    }
    matmul_into(kernels.data(), &cols, &mut out, dims.out_c, dims.patch_len(), area);
    Tensor::from_parts(vec![dims.out_c, dims.out_h, dims.out_w], out).checked("conv2d")
}

/// Vector-Jacobian products of [`conv2d`] for an upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads> {
    let dims = conv_dims(input, kernels, stride, pad)?;
    if grad_out.shape() != [dims.out_c, dims.out_h, dims.out_w] {
        return Err(shape_err("conv2d_backward", format!("upstream gradient {:?}", grad_out.shape())));
    }
    let (area, plen, oc) = (dims.out_area(), dims.patch_len(), dims.out_c);
    let cols = im2col_raw(input.data(), &dims);
    let g = grad_out.data();

    let bias: Vec<f64> = g.chunks_exact(area).map(|r| r.iter().sum()).collect();

    // dK = G · colsᵀ
    let cols_t = transpose_raw(&cols, plen, area);
    let mut dk = vec![0.0; oc * plen];
    matmul_into(g, &cols_t, &mut dk, oc, area, plen);

    // dcols = Kᵀ · G
    let k_t = transpose_raw(kernels.data(), oc, plen);
    let mut dcols = vec![0.0; plen * area];
    matmul_into(&k_t, g, &mut dcols, plen, oc, area);
    let dx = col2im_raw(&dcols, &dims);

    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx).checked("conv2d_backward")?,
        kernels: Tensor::from_parts(kernels.shape().to_vec(), dk).checked("conv2d_backward")?,
        bias: Tensor::from_parts(vec![oc], bias).checked("conv2d_backward")?,
    })
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Non-overlapping max pooling. Returns the pooled map and, for each output
/// cell, the flat input index of its maximum (lowest index wins ties).
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let FeatureShape { c, h, w } = input.feature_shape()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Geometry(format!("{h}x{w} map is not divisible by pooling window {window}")));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * window) * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = (ch * h + oy * window + dy) * w + ox * window + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out).checked("maxpool2d")?, arg))
}

/// Routes each upstream gradient to the input position that won its window.
pub fn maxpool2d_backward(grad_out: &Tensor, argmax: &[usize], input: FeatureShape) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err(
            "maxpool2d_backward",
            format!("{} gradients for {} windows", grad_out.len(), argmax.len()),
        ));
    }
    let mut dx = vec![0.0; input.numel()];
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        dx[idx] += g;
    }
    Ok(Tensor::from_parts(input.dims().to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(&[1, 2, 3], vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn stride_and_padding_extents() {
        let x = Tensor::zeros(&[1, 7, 6]);
        let k = Tensor::zeros(&[2, 1, 3, 3]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[2]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
    }

    #[test]
    fn pool_two_by_two() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn pool_ties_pick_first_index() {
        let x = Tensor::full(&[2, 4, 4], 1.5);
        let (y, arg) = maxpool2d(&x, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        assert_eq!(arg, vec![0, 2, 8, 10, 16, 18, 24, 26]);
    }

    #[test]
    fn pool_rejects_non_divisible() {
        assert!(maxpool2d(&Tensor::zeros(&[1, 5, 4]), 2).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = Tensor::new(&[2, 3, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cols = im2col(&x, 3, 1, 1).unwrap();
        let c = Tensor::new(cols.shape(), (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let back = col2im(&c, x.feature_shape().unwrap(), 3, 1, 1).unwrap();
        let lhs: f64 = cols.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
