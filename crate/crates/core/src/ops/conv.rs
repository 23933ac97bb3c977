//! Dense and depthwise 2-D cross-correlation with explicit backward kernels.
//!
//! Kernels are laid out `(C_out, C_in, k_h, k_w)`; depthwise kernels use
//! `(C, 1, k_h, k_w)` with one filter per input channel. Biases are stored
//! as `1 x C_out x 1 x 1` tensors. Output planes are computed independently
//! in parallel, each with a fixed accumulation order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(k: usize) -> Self {
        Self::new(1, k / 2)
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "kernel dims must be >= 1"));
        }
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if kh > ph || kw > pw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(((ph - kh) / sh + 1, (pw - kw) / sw + 1))
    }
}

/// Kernel, optional bias and geometry of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvWeights<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geom: ConvGeom,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>, geom: ConvGeom) -> Result<Self> {
        if let Some(b) = &bias {
            check_bias(b, kernel.shape().n)?;
        }
        Ok(ConvWeights { kernel, bias, geom })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, c_out: usize) -> Result<()> {
    let s = bias.shape();
    if s != (Shape {
        n: 1,
        c: c_out,
        h: 1,
        w: 1,
    }) {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {s} does not match 1x{c_out}x1x1"),
        ));
    }
    Ok(())
}

/// Range of output indices `o` for which `o * stride + k - pad` lands inside `[0, input)`.
#[inline]
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, input: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + pad > k {
        (input + pad - k).div_ceil(stride)
    } else {
        0
    };
    (lo.min(out), hi.min(out))
}

#[derive(Clone, Copy)]
struct PlaneGeom {
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl PlaneGeom {
    fn new(input: Shape, kh: usize, kw: usize, geom: ConvGeom) -> Result<Self> {
        let (oh, ow) = geom.output_hw(input.h, input.w, kh, kw)?;
        Ok(PlaneGeom {
            ih: input.h,
            iw: input.w,
            oh,
            ow,
            kh,
            kw,
            sh: geom.stride.0,
            sw: geom.stride.1,
            ph: geom.padding.0,
            pw: geom.padding.1,
        })
    }
}

/// `out += correlate(inp, k)` for one plane.
fn correlate_add<T: Scalar>(out: &mut [T], inp: &[T], k: &[T], g: PlaneGeom) {
    for ky in 0..g.kh {
        let (oy0, oy1) = valid_range(g.oh, g.sh, ky, g.ph, g.ih);
        for kx in 0..g.kw {
            let wv = k[ky * g.kw + kx];
            let (ox0, ox1) = valid_range(g.ow, g.sw, kx, g.pw, g.iw);
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * g.sh + ky - g.ph;
                let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
                let irow = &inp[iy * g.iw..(iy + 1) * g.iw];
                if g.sw == 1 {
                    let start = ox0 + kx - g.pw;
                    let src = &irow[start..start + (ox1 - ox0)];
                    for (o, &i) in orow[ox0..ox1].iter_mut().zip(src) {
                        *o += wv * i;
                    }
                } else {
                    for ox in ox0..ox1 {
                        orow[ox] += wv * irow[ox * g.sw + kx - g.pw];
                    }
                }
            }
        }
    }
}

/// `gin += correlate^T(gout, k)` for one plane (adjoint of [`correlate_add`]).
fn correlate_adjoint_add<T: Scalar>(gin: &mut [T], gout: &[T], k: &[T], g: PlaneGeom) {
    for ky in 0..g.kh {
        let (oy0, oy1) = valid_range(g.oh, g.sh, ky, g.ph, g.ih);
        for kx in 0..g.kw {
            let wv = k[ky * g.kw + kx];
            let (ox0, ox1) = valid_range(g.ow, g.sw, kx, g.pw, g.iw);
            if ox0 >= ox1 {
                continue;
            }
            for oy in oy0..oy1 {
                let iy = oy * g.sh + ky - g.ph;
                let grow = &gout[oy * g.ow..(oy + 1) * g.ow];
                let irow = &mut gin[iy * g.iw..(iy + 1) * g.iw];
                if g.sw == 1 {
                    let start = ox0 + kx - g.pw;
                    let dst = &mut irow[start..start + (ox1 - ox0)];
                    for (d, &gv) in dst.iter_mut().zip(&grow[ox0..ox1]) {
                        *d += wv * gv;
                    }
                } else {
                    for ox in ox0..ox1 {
                        irow[ox * g.sw + kx - g.pw] += wv * grow[ox];
                    }
                }
            }
        }
    }
}

/// `sum_{oy,ox} gout[oy,ox] * inp[oy*s+ky-p, ox*s+kx-p]` for one kernel tap.
fn tap_dot<T: Scalar>(gout: &[T], inp: &[T], ky: usize, kx: usize, g: PlaneGeom) -> T {
    let (oy0, oy1) = valid_range(g.oh, g.sh, ky, g.ph, g.ih);
    let (ox0, ox1) = valid_range(g.ow, g.sw, kx, g.pw, g.iw);
    let mut acc = T::zero();
    if ox0 >= ox1 {
        return acc;
    }
    for oy in oy0..oy1 {
        let iy = oy * g.sh + ky - g.ph;
        let grow = &gout[oy * g.ow..(oy + 1) * g.ow];
        let irow = &inp[iy * g.iw..(iy + 1) * g.iw];
        for ox in ox0..ox1 {
            acc += grow[ox] * irow[ox * g.sw + kx - g.pw];
        }
    }
    acc
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize)> {
    let ks = kernel.shape();
    let xs = x.shape();
    if xs.c != ks.c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel {ks} expects {}", xs.c, ks.c),
        ));
    }
    if let Some(b) = bias {
        check_bias(b, ks.n)?;
    }
    Ok((ks.n, ks.c))
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let (c_out, c_in) = conv_dims(x, kernel, bias)?;
    let xs = x.shape();
    let ks = kernel.shape();
    let g = PlaneGeom::new(xs, ks.h, ks.w, geom)?;
    let out_shape = Shape::new(xs.n, c_out, g.oh, g.ow)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_plane = xs.plane();
    let k_plane = ks.plane();
    let xd = x.data();
    let kd = kernel.data();
    out.par_chunks_mut(g.oh * g.ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, co) = (idx / c_out, idx % c_out);
            if let Some(b) = bias {
                plane.fill(b.data()[co]);
            }
            for ci in 0..c_in {
                let inp = &xd[(n * c_in + ci) * in_plane..][..in_plane];
                let k = &kd[(co * c_in + ci) * k_plane..][..k_plane];
                correlate_add(plane, inp, k, g);
            }
        });
    Tensor::from_vec(out_shape, out)
}

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy)]
pub struct GradMask {
    pub input: bool,
    pub kernel: bool,
    pub bias: bool,
}

#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Gradients of a dense convolution with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeom,
    gy: &Tensor<T>,
    mask: GradMask,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (c_out, c_in) = (ks.n, ks.c);
    let g = PlaneGeom::new(xs, ks.h, ks.w, geom)?;
    let out_plane = g.oh * g.ow;
    let in_plane = xs.plane();
    let k_plane = ks.plane();
    let (xd, kd, gd) = (x.data(), kernel.data(), gy.data());

    let gx = mask.input.then(|| {
        let mut gx = vec![T::zero(); xs.numel()];
        gx.par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(idx, plane)| {
                let (n, ci) = (idx / c_in, idx % c_in);
                for co in 0..c_out {
                    let gout = &gd[(n * c_out + co) * out_plane..][..out_plane];
                    let k = &kd[(co * c_in + ci) * k_plane..][..k_plane];
                    correlate_adjoint_add(plane, gout, k, g);
                }
            });
        gx
    });

    let gk = mask.kernel.then(|| {
        let mut gk = vec![T::zero(); ks.numel()];
        gk.par_chunks_mut(c_in * k_plane)
            .enumerate()
            .for_each(|(co, block)| {
                for ci in 0..c_in {
                    for ky in 0..ks.h {
                        for kx in 0..ks.w {
                            let mut acc = T::zero();
                            for n in 0..xs.n {
                                let gout = &gd[(n * c_out + co) * out_plane..][..out_plane];
                                let inp = &xd[(n * c_in + ci) * in_plane..][..in_plane];
                                acc += tap_dot(gout, inp, ky, kx, g);
                            }
                            block[(ci * ks.h + ky) * ks.w + kx] = acc;
                        }
                    }
                }
            });
        gk
    });

    let gb = mask.bias.then(|| bias_grad(gd, xs.n, c_out, out_plane));
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

fn bias_grad<T: Scalar>(gd: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|co| {
            let mut acc = T::zero();
            for b in 0..n {
                for &v in &gd[(b * c + co) * plane..][..plane] {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

fn depthwise_dims<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<usize> {
    let ks = kernel.shape();
    let c = x.shape().c;
    if ks.c != 1 || ks.n != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel {ks} incompatible with {c} input channels (expected {c}x1xKxK)"),
        ));
    }
    if let Some(b) = bias {
        check_bias(b, c)?;
    }
    Ok(c)
}

pub fn depthwise_conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let c = depthwise_dims(x, kernel, bias)?;
    let xs = x.shape();
    let ks = kernel.shape();
    let g = PlaneGeom::new(xs, ks.h, ks.w, geom)?;
    let out_shape = Shape::new(xs.n, c, g.oh, g.ow)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_plane = xs.plane();
    let k_plane = ks.plane();
    let (xd, kd) = (x.data(), kernel.data());
    out.par_chunks_mut(g.oh * g.ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let ch = idx % c;
            if let Some(b) = bias {
                plane.fill(b.data()[ch]);
            }
            let inp = &xd[idx * in_plane..][..in_plane];
            correlate_add(plane, inp, &kd[ch * k_plane..][..k_plane], g);
        });
    Tensor::from_vec(out_shape, out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeom,
    gy: &Tensor<T>,
    mask: GradMask,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    let c = xs.c;
    let g = PlaneGeom::new(xs, ks.h, ks.w, geom)?;
    let out_plane = g.oh * g.ow;
    let in_plane = xs.plane();
    let k_plane = ks.plane();
    let (xd, kd, gd) = (x.data(), kernel.data(), gy.data());

    let gx = mask.input.then(|| {
        let mut gx = vec![T::zero(); xs.numel()];
        gx.par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(idx, plane)| {
                let ch = idx % c;
                let gout = &gd[idx * out_plane..][..out_plane];
                correlate_adjoint_add(plane, gout, &kd[ch * k_plane..][..k_plane], g);
            });
        gx
    });

    let gk = mask.kernel.then(|| {
        let mut gk = vec![T::zero(); ks.numel()];
        gk.par_chunks_mut(k_plane)
            .enumerate()
            .for_each(|(ch, block)| {
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let mut acc = T::zero();
                        for n in 0..xs.n {
                            let idx = n * c + ch;
                            acc += tap_dot(
                                &gd[idx * out_plane..][..out_plane],
                                &xd[idx * in_plane..][..in_plane],
                                ky,
                                kx,
                                g,
                            );
                        }
                        block[ky * ks.w + kx] = acc;
                    }
                }
            });
        gk
    });

    let gb = mask.bias.then(|| bias_grad(gd, xs.n, c, out_plane));
    Ok(ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// Dense convolution through a [`ConvWeights`] bundle.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &w.kernel, w.bias.as_ref(), w.geom)
}

/// Per-channel `k x k` convolution followed by a `1 x 1` channel mix.
pub fn depthwise_separable_conv<T: Scalar>(
    x: &Tensor<T>,
    depthwise: &ConvWeights<T>,
    pointwise: &ConvWeights<T>,
) -> Result<Tensor<T>> {
    let ps = pointwise.kernel.shape();
    if ps.h != 1 || ps.w != 1 {
        return Err(Error::shape(
            "depthwise_separable_conv",
            format!("pointwise kernel must be 1x1, got {ps}"),
        ));
    }
    let mid = depthwise_conv2d_forward(
        x,
        &depthwise.kernel,
        depthwise.bias.as_ref(),
        depthwise.geom,
    )?;
    conv2d(&mid, pointwise)
}
