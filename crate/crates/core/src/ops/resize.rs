//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: s - i0 as f64,
            }
        })
        .collect()
}

fn check(op: &'static str, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            op,
            format!("target size {out_h}x{out_w} must be >= 1"),
        ));
    }
    Ok(())
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check("bilinear_resize", out_h, out_w)?;
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, out_h, out_w)?;
    if (out_h, out_w) == (s.h, s.w) {
        return Tensor::from_vec(out_shape, x.data().to_vec());
    }
    let ty = axis_taps(s.h, out_h);
    let tx = axis_taps(s.w, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for y in &ty {
            let r0 = &plane[y.i0 * s.w..(y.i0 + 1) * s.w];
            let r1 = &plane[y.i1 * s.w..(y.i1 + 1) * s.w];
            let fy = T::lit(y.frac);
            let gy = T::one() - fy;
            for xt in &tx {
                let fx = T::lit(xt.frac);
                let gx = T::one() - fx;
                let top = r0[xt.i0] * gx + r0[xt.i1] * fx;
                let bot = r1[xt.i0] * gx + r1[xt.i1] * fx;
                out.push(top * gy + bot * fy);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of [`bilinear_forward`].
pub fn bilinear_backward<T: Scalar>(input: Shape, gy: &Tensor<T>) -> Vec<T> {
    let gs = gy.shape();
    if (gs.h, gs.w) == (input.h, input.w) {
        return gy.data().to_vec();
    }
    let ty = axis_taps(input.h, gs.h);
    let tx = axis_taps(input.w, gs.w);
    let mut gx = vec![T::zero(); input.numel()];
    for (gin, gout) in gx
        .chunks_mut(input.plane())
        .zip(gy.data().chunks(gs.plane()))
    {
        for (oy, y) in ty.iter().enumerate() {
            let fy = T::lit(y.frac);
            let wy0 = T::one() - fy;
            for (ox, xt) in tx.iter().enumerate() {
                let g = gout[oy * gs.w + ox];
                let fx = T::lit(xt.frac);
                let wx0 = T::one() - fx;
                gin[y.i0 * input.w + xt.i0] += g * wy0 * wx0;
                gin[y.i0 * input.w + xt.i1] += g * wy0 * fx;
                gin[y.i1 * input.w + xt.i0] += g * fy * wx0;
                gin[y.i1 * input.w + xt.i1] += g * fy * fx;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_two_to_four() {
        let x = Tensor::from_slice([1, 1, 1, 2], &[0.0f64, 2.0]).unwrap();
        let y = bilinear_forward(&x, 1, 4).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn same_size_identity() {
        let x = Tensor::from_slice([1, 1, 2, 3], &[1.0f32, 5.0, -2.0, 0.5, 3.0, 9.0]).unwrap();
        assert_eq!(bilinear_forward(&x, 2, 3).unwrap().data(), x.data());
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(Shape::new(2, 2, 3, 5).unwrap(), 0.375f64);
        for (h, w) in [(1, 1), (7, 2), (13, 29), (3, 5)] {
            let y = bilinear_forward(&x, h, w).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.375).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2).unwrap());
        assert!(bilinear_forward(&x, 0, 3).is_err());
    }
}
