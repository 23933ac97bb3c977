//! Reverse-mode differentiation over a fixed operation set.
//!
//! Network and loss code is written once against [`Graph`] and runs on any
//! backend:
//!
//! * [`Tape`] records every operation so [`Tape::backward`] can propagate
//!   gradients to the leaves,
//! * [`Eval`] computes plain tensors and keeps nothing alive,
//! * [`crate::model::MacProbe`] tracks only shapes and tallies MACs.

mod eval;
mod gradcheck;
mod tape;

pub use eval::Eval;
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use tape::{Tape, Var};

use crate::error::Result;
use crate::ops::{ConvGeom, SampleRatio};
use crate::tensor::{Scalar, Shape, Tensor};

pub trait Graph<T: Scalar> {
    type Value;

    /// A value that never receives gradients.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    /// A trainable leaf; on a tape its gradient is populated by backward.
    fn param(&mut self, t: &Tensor<T>) -> Self::Value;
    fn shape_of(&self, v: &Self::Value) -> Shape;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scalar_mul(&mut self, a: &Self::Value, s: T) -> Result<Self::Value>;
    fn add_scalar(&mut self, a: &Self::Value, s: T) -> Result<Self::Value>;
    fn clamp(&mut self, a: &Self::Value, lo: T, hi: T) -> Result<Self::Value>;
    fn log(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn abs(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn sqrt(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn square(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value>;

    /// Sum of every element, as a 1x1x1x1 value.
    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Mean of every element, as a 1x1x1x1 value.
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Per-sample sums, as an Nx1x1x1 value.
    fn sum_per_sample(&mut self, a: &Self::Value) -> Result<Self::Value>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
        geom: ConvGeom,
    ) -> Result<Self::Value>;
    fn depthwise_conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: Option<&Self::Value>,
        geom: ConvGeom,
    ) -> Result<Self::Value>;
    fn maxpool2d(&mut self, x: &Self::Value, k: usize, stride: usize) -> Result<Self::Value>;
    fn bilinear_resize(
        &mut self,
        x: &Self::Value,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, ratio: SampleRatio) -> Result<Self::Value>;
    fn pixel_unshuffle(&mut self, x: &Self::Value, ratio: SampleRatio) -> Result<Self::Value>;
}
