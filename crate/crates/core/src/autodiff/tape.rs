use std::sync::atomic::{AtomicUsize, Ordering};

use super::Graph;
use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeom, GradMask};
use crate::ops::{pool, resize, shuffle, SampleRatio};
use crate::tensor::{Scalar, Shape, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScalarMul(usize, T),
    AddScalar(usize),
    Clamp(usize, T, T),
    Log(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    SumPerSample(usize),
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    DepthwiseConv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Bilinear(usize),
    PixelShuffle(usize, SampleRatio),
    PixelUnshuffle(usize, SampleRatio),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of a forward computation. Nodes are appended in execution
/// order, so every node's inputs precede it and a reverse sweep visits each
/// node once.
#[derive(Debug)]
pub struct Tape<T = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: &Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: &Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn grad(&self, v: &Var) -> Option<&[T]> {
        let i = self.idx(v).ok()?;
        self.nodes[i].value.grad()
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn unary(
        &mut self,
        a: &Var,
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
        op: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = f(&self.nodes[ia].value)?;
        let needs = self.needs(ia);
        Ok(self.push(out, op(ia), needs))
    }

    fn binary(
        &mut self,
        a: &Var,
        b: &Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = f(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, op(ia, ib), needs))
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        let li = self.idx(loss)?;
        let shape = self.nodes[li].value.shape();
        if shape != Shape::SCALAR {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; li + 1];
        grads[li] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            for (input, contribution) in self.node_backward(node, g)? {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(vec![T::zero(); n]);
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node<T>, g: Vec<T>) -> Result<Vec<(usize, Vec<T>)>> {
        let val = |i: usize| self.nodes[i].value.data();
        let y = node.value.data();
        let map1 = |a: usize, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            g.iter()
                .zip(val(a))
                .zip(y)
                .map(|((&g, &x), &y)| f(g, x, y))
                .collect()
        };
        let out = match node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(&g, &vb)| g * vb).collect();
                let gb = g.iter().zip(val(a)).map(|(&g, &va)| g * va).collect();
                vec![(a, ga), (b, gb)]
            }
            Op::Div(a, b) => {
                let ga = g.iter().zip(val(b)).map(|(&g, &vb)| g / vb).collect();
                let gb = g
                    .iter()
                    .zip(val(b))
                    .zip(y)
                    .map(|((&g, &vb), &y)| -g * y / vb)
                    .collect();
                vec![(a, ga), (b, gb)]
            }
            Op::ScalarMul(a, s) => vec![(a, g.iter().map(|&v| v * s).collect())],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::Clamp(a, lo, hi) => vec![(
                a,
                map1(a, &|g, x, _| if x >= lo && x <= hi { g } else { T::zero() }),
            )],
            Op::Log(a) => vec![(a, map1(a, &|g, x, _| g / x))],
            Op::Abs(a) => vec![(
                a,
                map1(a, &|g, x, _| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Sqrt(a) => vec![(
                a,
                map1(a, &|g, _, y| {
                    if y > T::zero() {
                        g / (y + y)
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Square(a) => vec![(a, map1(a, &|g, x, _| g * (x + x)))],
            Op::Relu(a) => vec![(
                a,
                map1(a, &|g, x, _| if x > T::zero() { g } else { T::zero() }),
            )],
            Op::Sigmoid(a) => vec![(a, map1(a, &|g, _, y| g * y * (T::one() - y)))],
            Op::Sum(a) => vec![(a, vec![g[0]; self.nodes[a].value.numel()])],
            Op::Mean(a) => {
                let n = self.nodes[a].value.numel();
                vec![(a, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::SumPerSample(a) => {
                let s = self.nodes[a].value.shape();
                let per = s.c * s.plane();
                let mut ga = Vec::with_capacity(s.numel());
                for &gn in &g {
                    ga.extend(std::iter::repeat_n(gn, per));
                }
                vec![(a, ga)]
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            }
            | Op::DepthwiseConv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let gy = Tensor::from_vec(node.value.shape(), g)?;
                let mask = GradMask {
                    input: self.needs(x),
                    kernel: self.needs(kernel),
                    bias: bias.is_some_and(|b| self.needs(b)),
                };
                let (xv, kv) = (&self.nodes[x].value, &self.nodes[kernel].value);
                let grads = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward(xv, kv, geom, &gy, mask)?
                } else {
                    conv::depthwise_conv2d_backward(xv, kv, geom, &gy, mask)?
                };
                let mut out = Vec::with_capacity(3);
                if let Some(gx) = grads.input {
                    out.push((x, gx));
                }
                if let Some(gk) = grads.kernel {
                    out.push((kernel, gk));
                }
                if let (Some(b), Some(gb)) = (bias, grads.bias) {
                    out.push((b, gb));
                }
                out
            }
            Op::MaxPool { x, ref argmax } => {
                vec![(
                    x,
                    pool::maxpool2d_backward(self.nodes[x].value.shape(), argmax, &g),
                )]
            }
            Op::Bilinear(x) => {
                let gy = Tensor::from_vec(node.value.shape(), g)?;
                vec![(
                    x,
                    resize::bilinear_backward(self.nodes[x].value.shape(), &gy),
                )]
            }
            Op::PixelShuffle(x, r) => {
                let gy = Tensor::from_vec(node.value.shape(), g)?;
                vec![(x, shuffle::pixel_unshuffle(&gy, r)?.into_data())]
            }
            Op::PixelUnshuffle(x, r) => {
                let gy = Tensor::from_vec(node.value.shape(), g)?;
                vec![(x, shuffle::pixel_shuffle(&gy, r)?.into_data())]
            }
        };
        Ok(out)
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut t = t.clone();
        t.clear_grad();
        self.leaf(t.with_requires_grad(true))
    }

    fn shape_of(&self, v: &Var) -> Shape {
        self.nodes[v.index].value.shape()
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |a, b| a.add(b), Op::Add)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |a, b| a.sub(b), Op::Sub)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |a, b| a.mul(b), Op::Mul)
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, |a, b| a.div(b), Op::Div)
    }

    fn scalar_mul(&mut self, a: &Var, s: T) -> Result<Var> {
        self.unary(a, |a| Ok(a.scalar_mul(s)), |i| Op::ScalarMul(i, s))
    }

    fn add_scalar(&mut self, a: &Var, s: T) -> Result<Var> {
        self.unary(a, |a| Ok(a.add_scalar(s)), Op::AddScalar)
    }

    fn clamp(&mut self, a: &Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::Domain {
                op: "clamp",
                msg: format!("empty range [{lo}, {hi}]"),
            });
        }
        self.unary(a, |a| Ok(a.clamp(lo, hi)), |i| Op::Clamp(i, lo, hi))
    }

    fn log(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| a.ln(), Op::Log)
    }

    fn abs(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(a.abs()), Op::Abs)
    }

    fn sqrt(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| a.sqrt(), Op::Sqrt)
    }

    fn square(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(a.square()), Op::Square)
    }

    fn relu(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(a.relu()), Op::Relu)
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(a.sigmoid()), Op::Sigmoid)
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(Tensor::scalar(a.sum_all())), Op::Sum)
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(Tensor::scalar(a.mean_all())), Op::Mean)
    }

    fn sum_per_sample(&mut self, a: &Var) -> Result<Var> {
        self.unary(a, |a| Ok(a.sum_per_sample()), Op::SumPerSample)
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, bias: Option<&Var>, geom: ConvGeom) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernel)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let out = conv::conv2d_forward(
            &self.nodes[ix].value,
            &self.nodes[ik].value,
            ib.map(|b| &self.nodes[b].value),
            geom,
        )?;
        let needs = self.needs(ix) || self.needs(ik) || ib.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: ix,
                kernel: ik,
                bias: ib,
                geom,
            },
            needs,
        ))
    }

    fn depthwise_conv2d(
        &mut self,
        x: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        geom: ConvGeom,
    ) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernel)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let out = conv::depthwise_conv2d_forward(
            &self.nodes[ix].value,
            &self.nodes[ik].value,
            ib.map(|b| &self.nodes[b].value),
            geom,
        )?;
        let needs = self.needs(ix) || self.needs(ik) || ib.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::DepthwiseConv2d {
                x: ix,
                kernel: ik,
                bias: ib,
                geom,
            },
            needs,
        ))
    }

    fn maxpool2d(&mut self, x: &Var, k: usize, stride: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (out, argmax) = pool::maxpool2d_forward(&self.nodes[ix].value, k, stride)?;
        let needs = self.needs(ix);
        Ok(self.push(out, Op::MaxPool { x: ix, argmax }, needs))
    }

    fn bilinear_resize(&mut self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.unary(
            x,
            |x| resize::bilinear_forward(x, out_h, out_w),
            Op::Bilinear,
        )
    }

    fn pixel_shuffle(&mut self, x: &Var, ratio: SampleRatio) -> Result<Var> {
        self.unary(
            x,
            |x| shuffle::pixel_shuffle(x, ratio),
            |i| Op::PixelShuffle(i, ratio),
        )
    }

    fn pixel_unshuffle(&mut self, x: &Var, ratio: SampleRatio) -> Result<Var> {
        self.unary(
            x,
            |x| shuffle::pixel_unshuffle(x, ratio),
            |i| Op::PixelUnshuffle(i, ratio),
        )
    }
}
