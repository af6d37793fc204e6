//! Lambda+ layers and the LambdaUNet 2.5D segmentation network, with a naive
//! per-pixel reference path, a convolution-parallelized fast path, synthetic
//! anisotropic volume generation, training, and segmentation metrics.

pub mod autodiff;
pub mod error;
pub mod lambda;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
