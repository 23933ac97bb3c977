//! Pixel shuffle (depth-to-space) and its inverse.
//!
//! Channel `c·t² + i·t + j` of the low resolution map fills cell `(i, j)` of
//! the `t x t` grid belonging to each pixel:
//! `out[n][c][h·t+i][w·t+j] = x[n][c·t²+i·t+j][h][w]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Validated sampling ratio, `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRatio(usize);

impl SampleRatio {
    pub fn new(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("sampling ratio must be >= 1".into()));
        }
        Ok(SampleRatio(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, ratio: SampleRatio) -> Result<Tensor<T>> {
    let t = ratio.get();
    let s = x.shape();
    let tt = t * t;
    if !s.c.is_multiple_of(tt) {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by t²={tt}", s.c),
        ));
    }
    let out_shape = Shape::new(s.n, s.c / tt, s.h * t, s.w * t)?;
    let mut out = vec![T::zero(); s.numel()];
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..out_shape.c {
            for i in 0..t {
                for j in 0..t {
                    let src_c = c * tt + i * t + j;
                    for h in 0..s.h {
                        let src = &xd[s.index(n, src_c, h, 0)..][..s.w];
                        let row = out_shape.index(n, c, h * t + i, 0);
                        for (w, &v) in src.iter().enumerate() {
                            out[row + w * t + j] = v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, ratio: SampleRatio) -> Result<Tensor<T>> {
    let t = ratio.get();
    let s = x.shape();
    if !s.h.is_multiple_of(t) || !s.w.is_multiple_of(t) {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial size {}x{} not divisible by t={t}", s.h, s.w),
        ));
    }
    let tt = t * t;
    let out_shape = Shape::new(s.n, s.c * tt, s.h / t, s.w / t)?;
    let mut out = vec![T::zero(); s.numel()];
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..t {
                for j in 0..t {
                    let dst_c = c * tt + i * t + j;
                    for h in 0..out_shape.h {
                        let row = s.index(n, c, h * t + i, 0);
                        let dst = out_shape.index(n, dst_c, h, 0);
                        for w in 0..out_shape.w {
                            out[dst + w] = xd[row + w * t + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}
