//! Shape-only backend that tallies convolution MACs while running the real
//! forward code.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::ops::{ConvGeom, SampleRatio};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Default, Clone, Copy)]
pub struct MacProbe {
    pub macs: u64,
}

impl MacProbe {
    pub fn new() -> Self {
        MacProbe::default()
    }

    fn same(op: &'static str, a: &Shape, b: &Shape) -> Result<Shape> {
        if a == b {
            Ok(*a)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: *a,
                right: *b,
            })
        }
    }
}

impl<T: Scalar> Graph<T> for MacProbe {
    type Value = Shape;

    fn constant(&mut self, t: Tensor<T>) -> Shape {
        t.shape()
    }
    fn param(&mut self, t: &Tensor<T>) -> Shape {
        t.shape()
    }
    fn shape_of(&self, v: &Shape) -> Shape {
        *v
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        Self::same("add", a, b)
    }
    fn sub(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        Self::same("sub", a, b)
    }
    fn mul(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        Self::same("mul", a, b)
    }
    fn div(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        Self::same("div", a, b)
    }
    fn scalar_mul(&mut self, a: &Shape, _: T) -> Result<Shape> {
        Ok(*a)
    }
    fn add_scalar(&mut self, a: &Shape, _: T) -> Result<Shape> {
        Ok(*a)
    }
    fn clamp(&mut self, a: &Shape, _: T, _: T) -> Result<Shape> {
        Ok(*a)
    }
    fn log(&mut self, a: &Shape) -> Result<Shape> {
        Ok(*a)
    }
    fn abs(&mut self, a: &Shape) -> Result<Shape> {
        Ok(*a)
    }
    fn sqrt(&mut self, a: &Shape) -> Result<Shape> {
        Ok(*a)
    }
    fn square(&mut self, a: &Shape) -> Result<Shape> {
        Ok(*a)
    }
    fn relu(&mut self, a: &Shape) -> Result<Shape> {
        Ok(*a)
    }
    fn sigmoid(&mut self, a: &Shape) -> Result<Shape> {
        Ok(*a)
    }
    fn sum(&mut self, _: &Shape) -> Result<Shape> {
        Ok(Shape::SCALAR)
    }
    fn mean(&mut self, _: &Shape) -> Result<Shape> {
        Ok(Shape::SCALAR)
    }
    fn sum_per_sample(&mut self, a: &Shape) -> Result<Shape> {
        Ok(Shape {
            n: a.n,
            c: 1,
            h: 1,
            w: 1,
        })
    }

    fn conv2d(&mut self, x: &Shape, k: &Shape, _: Option<&Shape>, geom: ConvGeom) -> Result<Shape> {
        if x.c != k.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: *x,
                right: *k,
            });
        }
        let (oh, ow) = geom.output_hw(x.h, x.w, k.h, k.w)?;
        self.macs += (x.n * oh * ow * k.n * k.c * k.h * k.w) as u64;
        Ok(Shape {
            n: x.n,
            c: k.n,
            h: oh,
            w: ow,
        })
    }

    fn depthwise_conv2d(
        &mut self,
        x: &Shape,
        k: &Shape,
        _: Option<&Shape>,
        geom: ConvGeom,
    ) -> Result<Shape> {
        if k.n != x.c || k.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                left: *x,
                right: *k,
            });
        }
        let (oh, ow) = geom.output_hw(x.h, x.w, k.h, k.w)?;
        self.macs += (x.n * oh * ow * x.c * k.h * k.w) as u64;
        Ok(Shape { h: oh, w: ow, ..*x })
    }

    fn maxpool2d(&mut self, x: &Shape, k: usize, stride: usize) -> Result<Shape> {
        if k == 0 || stride == 0 || x.h < k || x.w < k {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {k} stride {stride} on {x}"),
            ));
        }
        Ok(Shape {
            h: (x.h - k) / stride + 1,
            w: (x.w - k) / stride + 1,
            ..*x
        })
    }

    fn bilinear_resize(&mut self, x: &Shape, out_h: usize, out_w: usize) -> Result<Shape> {
        Shape::new(x.n, x.c, out_h, out_w)
    }

    fn pixel_shuffle(&mut self, x: &Shape, ratio: SampleRatio) -> Result<Shape> {
        let t = ratio.get();
        if !x.c.is_multiple_of(t * t) {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("{} channels not divisible by {}", x.c, t * t),
            ));
        }
        Ok(Shape {
            n: x.n,
            c: x.c / (t * t),
            h: x.h * t,
            w: x.w * t,
        })
    }

    fn pixel_unshuffle(&mut self, x: &Shape, ratio: SampleRatio) -> Result<Shape> {
        let t = ratio.get();
        if !x.h.is_multiple_of(t) || !x.w.is_multiple_of(t) {
            return Err(Error::shape(
                "pixel_unshuffle",
                format!("{x} not divisible by {t}"),
            ));
        }
        Ok(Shape {
            n: x.n,
            c: x.c * t * t,
            h: x.h / t,
            w: x.w / t,
        })
    }
}
