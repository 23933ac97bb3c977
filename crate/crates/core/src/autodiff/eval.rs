use std::marker::PhantomData;

use super::Graph;
use crate::error::{Error, Result};
use crate::ops::{conv, pool, resize, shuffle, ConvGeom, SampleRatio};
use crate::tensor::{Scalar, Shape, Tensor};

/// Gradient-free backend: every op returns an owned tensor and nothing is
/// retained, so peak memory stays at a few live activations.
#[derive(Debug, Default)]
pub struct Eval<T = f32> {
    _marker: PhantomData<T>,
}

impl<T: Scalar> Eval<T> {
    pub fn new() -> Self {
        Eval {
            _marker: PhantomData,
        }
    }
}

impl<T: Scalar> Graph<T> for Eval<T> {
    type Value = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t.with_requires_grad(false)
    }

    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let mut t = t.clone();
        t.clear_grad();
        t
    }

    fn shape_of(&self, v: &Tensor<T>) -> Shape {
        v.shape()
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.add(b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.sub(b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.mul(b)
    }

    fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        a.div(b)
    }

    fn scalar_mul(&mut self, a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        Ok(a.scalar_mul(s))
    }

    fn add_scalar(&mut self, a: &Tensor<T>, s: T) -> Result<Tensor<T>> {
        Ok(a.add_scalar(s))
    }

    fn clamp(&mut self, a: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
        if lo > hi {
            return Err(Error::Domain {
                op: "clamp",
                msg: format!("empty range [{lo}, {hi}]"),
            });
        }
        Ok(a.clamp(lo, hi))
    }

    fn log(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        a.ln()
    }

    fn abs(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.abs())
    }

    fn sqrt(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        a.sqrt()
    }

    fn square(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.square())
    }

    fn relu(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.relu())
    }

    fn sigmoid(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.sigmoid())
    }

    fn sum(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(a.sum_all()))
    }

    fn mean(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(a.mean_all()))
    }

    fn sum_per_sample(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(a.sum_per_sample())
    }

    fn conv2d(
        &mut self,
        x: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeom,
    ) -> Result<Tensor<T>> {
        conv::conv2d_forward(x, kernel, bias, geom)
    }

    fn depthwise_conv2d(
        &mut self,
        x: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeom,
    ) -> Result<Tensor<T>> {
        conv::depthwise_conv2d_forward(x, kernel, bias, geom)
    }

    fn maxpool2d(&mut self, x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
        pool::maxpool2d_forward(x, k, stride).map(|(y, _)| y)
    }

    fn bilinear_resize(&mut self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        resize::bilinear_forward(x, out_h, out_w)
    }

    fn pixel_shuffle(&mut self, x: &Tensor<T>, ratio: SampleRatio) -> Result<Tensor<T>> {
        shuffle::pixel_shuffle(x, ratio)
    }

    fn pixel_unshuffle(&mut self, x: &Tensor<T>, ratio: SampleRatio) -> Result<Tensor<T>> {
        shuffle::pixel_unshuffle(x, ratio)
    }
}
