//! Structured network operations: convolution, pooling, resizing and the
//! pixel shuffle pair. Each operation exposes a forward kernel and the
//! matching backward kernel used by the tape.

pub mod conv;
pub mod pool;
pub mod resize;
pub mod shuffle;

pub use conv::{conv2d, depthwise_separable_conv, ConvGeom, ConvWeights};
pub use shuffle::{pixel_shuffle, pixel_unshuffle, SampleRatio};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    pool::maxpool2d_forward(x, k, stride).map(|(y, _)| y)
}

pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    resize::bilinear_forward(x, out_h, out_w)
}
