//! Dense row-major `f64` tensors and the raw kernels built on them.
//!
//! Every kernel is a pure function of its inputs and checks that its result
//! is finite before handing it back.

mod conv;
mod elementwise;
mod patch;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

pub use conv::{col2im, conv2d, conv2d_backward, im2col, maxpool2d, maxpool2d_backward, Conv2dGrads};
pub use elementwise::{
    add, cross_entropy_logits, dot, elementwise_dot, global_avg_pool, l2norm_rows, l2norm_rows_backward, matmul,
    matvec, mean, mul, mul_rows, relu, scale, sigmoid, sigmoid_scalar, softplus, softplus_scalar, sub, sum, transpose,
};
pub use patch::{fold, unfold};

/// A dense array with an explicit shape. The last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err("new", format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} holds {expected} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Panics on an empty or zero-extent shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "invalid shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Interprets a rank-3 tensor as a `C×H×W` feature map.
    pub fn feature_shape(&self) -> Result<FeatureShape> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok(FeatureShape { c, h, w }),
            _ => Err(shape_err("feature_shape", format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Tensor> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

/// Extents of a `C×H×W` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        FeatureShape { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }
}

/// How a feature map is cut into non-overlapping `d×d` tokens.
///
/// Tokens are numbered row-major over the `grid_h × grid_w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGeometry {
    pub feature: FeatureShape,
    pub patch: usize,
}

impl TokenGeometry {
    pub fn new(feature: FeatureShape, patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Geometry("patch size must be positive".into()));
        }
        if feature.c == 0 || feature.h == 0 || feature.w == 0 {
            return Err(Error::Geometry(format!("empty feature map {:?}", feature.dims())));
        }
        if !feature.h.is_multiple_of(patch) || !feature.w.is_multiple_of(patch) {
            return Err(Error::Geometry(format!(
                "{}x{} map is not divisible by patch size {patch}",
                feature.h, feature.w
            )));
        }
        Ok(TokenGeometry { feature, patch })
    }

    pub fn grid_h(&self) -> usize {
        self.feature.h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.feature.w / self.patch
    }

    /// Number of tokens `N`.
    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Flattened token width `D = C·d²`.
    pub fn token_dim(&self) -> usize {
        self.feature.c * self.patch * self.patch
    }

    /// Grid coordinates of token `i`.
    pub fn cell(&self, token: usize) -> (usize, usize) {
        (token / self.grid_w(), token % self.grid_w())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn paper_scale_geometry() {
        let g = TokenGeometry::new(FeatureShape::new(256, 14, 14), 2).unwrap();
        assert_eq!((g.grid_h(), g.grid_w()), (7, 7));
        assert_eq!(g.tokens(), 49);
        assert_eq!(g.token_dim(), 1024);
    }

    #[test]
    fn geometry_rejects_non_divisible() {
        assert!(TokenGeometry::new(FeatureShape::new(4, 14, 14), 3).is_err());
        assert!(TokenGeometry::new(FeatureShape::new(4, 14, 14), 0).is_err());
    }
}
