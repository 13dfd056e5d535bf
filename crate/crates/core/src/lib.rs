//! Energy-regularized spatial masking.
//!
//! A small, dependency-light numerical core: a dense `f64` tensor with the
//! kernels a compact convolutional classifier needs, a reverse-mode tape,
//! the energy-mask layer (unary + pairwise token energies, soft gating,
//! expected-energy regularizer), a synthetic planted-object dataset, the
//! AdamW/cosine training loop and the deletion-robustness evaluation suite.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line driver live in the companion `ersm` crate.

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod energy_mask;
mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{FeatureShape, Tensor, TokenGeometry};
