use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Max pooling with a square window. Returns the pooled tensor and, for every
/// output element, the flat input index that won the window. Ties go to the
/// first element in row-major window order.
pub fn maxpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if k == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d", "window and stride must be >= 1"));
    }
    if s.h < k || s.w < k {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {k}x{k} larger than input {}x{}", s.h, s.w),
        ));
    }
    let oh = (s.h - k) / stride + 1;
    let ow = (s.w - k) / stride + 1;
    let out_shape = Shape::new(s.n, s.c, oh, ow)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * s.w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * s.w + ox * stride + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(input: Shape, argmax: &[usize], gy: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input.numel()];
    for (&idx, &g) in argmax.iter().zip(gy) {
        gx[idx] += g;
    }
    gx
}
