//! Network assembly: layer plan, parameter initialisation and the forward
//! pass shared by every [`Graph`] backend.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Boundary, ModelConfig};
use crate::autodiff::{Eval, Graph};
use crate::error::{Error, Result};
use crate::ops::ConvGeom;
use crate::tensor::{Shape, Tensor};

pub type ParamStore = BTreeMap<String, Tensor<f32>>;

/// Parameters bound into a particular backend, keyed like [`ParamStore`].
pub type Bound<V> = BTreeMap<String, V>;

const KERNEL: usize = 3;
const BOTTOM_CONVS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Dense 3x3 convolution.
    Dense,
    /// Depthwise 3x3 followed by pointwise 1x1.
    Separable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub kind: ConvKind,
    pub c_in: usize,
    pub c_out: usize,
    /// Last layer of a residual branch: its output kernel starts at zero so
    /// the branch is initially an identity.
    pub closes_residual: bool,
}

impl LayerDef {
    fn new(name: impl Into<String>, kind: ConvKind, c_in: usize, c_out: usize) -> Self {
        LayerDef {
            name: name.into(),
            kind,
            c_in,
            c_out,
            closes_residual: false,
        }
    }

    fn closing(mut self) -> Self {
        self.closes_residual = true;
        self
    }

    /// `(name, shape, fan_in)` for every tensor the layer owns; fan_in is
    /// `None` for tensors that start at zero.
    pub fn tensors(&self) -> Vec<(String, Shape, Option<usize>)> {
        let k = KERNEL;
        let s = |n, c, h, w| Shape { n, c, h, w };
        let out_fan = |fan| (!self.closes_residual).then_some(fan);
        match self.kind {
            ConvKind::Dense => vec![
                (
                    format!("{}.weight", self.name),
                    s(self.c_out, self.c_in, k, k),
                    out_fan(self.c_in * k * k),
                ),
                (format!("{}.bias", self.name), s(1, self.c_out, 1, 1), None),
            ],
            ConvKind::Separable => vec![
                (
                    format!("{}.dw.weight", self.name),
                    s(self.c_in, 1, k, k),
                    Some(k * k),
                ),
                (
                    format!("{}.dw.bias", self.name),
                    s(1, self.c_in, 1, 1),
                    None,
                ),
                (
                    format!("{}.pw.weight", self.name),
                    s(self.c_out, self.c_in, 1, 1),
                    out_fan(self.c_in),
                ),
                (
                    format!("{}.pw.bias", self.name),
                    s(1, self.c_out, 1, 1),
                    None,
                ),
            ],
        }
    }
}

fn trsu_layers(
    out: &mut Vec<LayerDef>,
    prefix: &str,
    kind: ConvKind,
    c_in: usize,
    c_out: usize,
    mid: usize,
    depth: usize,
) {
    use ConvKind::Separable as Sep;
    out.push(LayerDef::new(format!("{prefix}.entry"), kind, c_in, c_out));
    for k in 1..=depth {
        let cin = if k == 1 { c_out } else { mid };
        out.push(LayerDef::new(format!("{prefix}.down{k}"), Sep, cin, mid));
    }
    for b in 1..=BOTTOM_CONVS {
        let cin = if b == 1 && depth == 0 { c_out } else { mid };
        out.push(LayerDef::new(format!("{prefix}.bottom{b}"), Sep, cin, mid));
    }
    for k in 1..=depth {
        out.push(LayerDef::new(format!("{prefix}.up{k}"), Sep, mid, mid));
    }
    out.push(LayerDef::new(format!("{prefix}.exit"), kind, mid, c_out).closing());
}

/// Every convolution in the network, in forward order.
pub fn layer_plan(cfg: &ModelConfig) -> Vec<LayerDef> {
    let s = cfg.num_stages();
    let w = &cfg.stage_widths;
    let mut out = vec![LayerDef::new(
        "stem",
        ConvKind::Dense,
        cfg.stem_in_channels(),
        w[0],
    )];
    for i in 0..s {
        trsu_layers(
            &mut out,
            &format!("enc{i}"),
            ConvKind::Dense,
            cfg.encoder_in_width(i),
            w[i],
            cfg.trsu_mid_widths[i],
            cfg.trsu_depths[i],
        );
    }
    for l in 0..cfg.mid_block_layers {
        let layer = LayerDef::new(
            format!("mid.layer{l}"),
            ConvKind::Separable,
            w[s - 1],
            w[s - 1],
        );
        out.push(if l + 1 == cfg.mid_block_layers {
            layer.closing()
        } else {
            layer
        });
    }
    for i in (0..s).rev() {
        trsu_layers(
            &mut out,
            &format!("dec{i}"),
            ConvKind::Separable,
            w[i],
            cfg.decoder_out_width(i),
            cfg.trsu_mid_widths[i],
            cfg.trsu_depths[i],
        );
    }
    out.push(LayerDef::new(
        "head",
        ConvKind::Dense,
        w[0],
        cfg.head_out_channels(),
    ));
    out
}

/// Name → shape for every parameter tensor the configuration requires.
pub fn param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Shape> {
    layer_plan(cfg)
        .iter()
        .flat_map(|l| l.tensors())
        .map(|(name, shape, _)| (name, shape))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PsuNet {
    config: ModelConfig,
    params: ParamStore,
}

impl PsuNet {
    /// Kaiming-uniform (fan-in) kernels and zero biases from a seeded stream,
    /// drawn in sorted parameter-name order.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut specs: Vec<(String, Shape, Option<usize>)> = layer_plan(&config)
            .iter()
            .flat_map(|l| l.tensors())
            .collect();
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in specs {
            let t = match fan_in {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    let data = (0..shape.numel())
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    Tensor::from_vec(shape, data)?
                }
                None => Tensor::zeros(shape),
            };
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {name}")));
            }
        }
        Ok(PsuNet { config, params })
    }

    /// Reassembles a model from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == *shape => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {}, expected {shape}",
                        t.shape()
                    )));
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(PsuNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    /// Total number of parameter elements actually allocated.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bind<G: Graph<f32>>(&self, g: &mut G) -> Bound<G::Value> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v)))
            .collect()
    }

    /// Saliency map in (0, 1) with the spatial size of `image`.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Eval::new();
        let bound = self.bind(&mut g);
        forward(&mut g, &self.config, &bound, image)
    }
}

fn param<'a, V>(bound: &'a Bound<V>, name: &str) -> Result<&'a V> {
    bound
        .get(name)
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

/// One 3x3 convolution layer (dense or separable), optionally followed by ReLU.
pub fn conv_layer<G: Graph<f32>>(
    g: &mut G,
    bound: &Bound<G::Value>,
    name: &str,
    kind: ConvKind,
    x: &G::Value,
    relu: bool,
) -> Result<G::Value> {
    let same = ConvGeom::same(KERNEL);
    let y = match kind {
        ConvKind::Dense => {
            let w = param(bound, &format!("{name}.weight"))?;
            let b = param(bound, &format!("{name}.bias"))?;
            g.conv2d(x, w, Some(b), same)?
        }
        ConvKind::Separable => {
            let dw = param(bound, &format!("{name}.dw.weight"))?;
            let dwb = param(bound, &format!("{name}.dw.bias"))?;
            let pw = param(bound, &format!("{name}.pw.weight"))?;
            let pwb = param(bound, &format!("{name}.pw.bias"))?;
            let mid = g.depthwise_conv2d(x, dw, Some(dwb), same)?;
            g.conv2d(&mid, pw, Some(pwb), ConvGeom::new(1, 0))?
        }
    };
    if relu {
        g.relu(&y)
    } else {
        Ok(y)
    }
}

/// Tiny residual U-block. `kind` selects the entry/exit convolution type;
/// the inner path is always depthwise separable.
pub fn trsu_forward<G: Graph<f32>>(
    g: &mut G,
    bound: &Bound<G::Value>,
    prefix: &str,
    x: &G::Value,
    depth: usize,
    kind: ConvKind,
) -> Result<G::Value> {
    let s = g.shape_of(x);
    let m = 1usize << depth;
    if s.h % m != 0 || s.w % m != 0 {
        return Err(Error::shape(
            "trsu",
            format!(
                "{prefix}: spatial size {}x{} not divisible by 2^{depth}",
                s.h, s.w
            ),
        ));
    }
    let sep = ConvKind::Separable;
    let entry = conv_layer(g, bound, &format!("{prefix}.entry"), kind, x, true)?;
    let mut skips = Vec::with_capacity(depth);
    let mut cur = None;
    for k in 1..=depth {
        let input = cur.as_ref().unwrap_or(&entry);
        let a = conv_layer(g, bound, &format!("{prefix}.down{k}"), sep, input, true)?;
        cur = Some(g.maxpool2d(&a, 2, 2)?);
        skips.push(a);
    }
    for b in 1..=BOTTOM_CONVS {
        let input = cur.as_ref().unwrap_or(&entry);
        cur = Some(conv_layer(
            g,
            bound,
            &format!("{prefix}.bottom{b}"),
            sep,
            input,
            true,
        )?);
    }
    let mut cur = cur.expect("bottom convs ran");
    for k in (1..=depth).rev() {
        let skip = &skips[k - 1];
        let ss = g.shape_of(skip);
        let up = g.bilinear_resize(&cur, ss.h, ss.w)?;
        let merged = g.add(&up, skip)?;
        cur = conv_layer(g, bound, &format!("{prefix}.up{k}"), sep, &merged, true)?;
    }
    let exit = conv_layer(g, bound, &format!("{prefix}.exit"), kind, &cur, false)?;
    let sum = g.add(&exit, &entry)?;
    g.relu(&sum)
}

/// Stack of separable convolutions at constant width with an outer residual.
pub fn midblock_forward<G: Graph<f32>>(
    g: &mut G,
    bound: &Bound<G::Value>,
    x: &G::Value,
    layers: usize,
) -> Result<G::Value> {
    let mut cur = None;
    for l in 0..layers {
        let input = cur.as_ref().unwrap_or(x);
        let last = l + 1 == layers;
        cur = Some(conv_layer(
            g,
            bound,
            &format!("mid.layer{l}"),
            ConvKind::Separable,
            input,
            !last,
        )?);
    }
    match cur {
        Some(c) => {
            let sum = g.add(&c, x)?;
            g.relu(&sum)
        }
        None => g.scalar_mul(x, 1.0),
    }
}

/// Full network. Returns probabilities in (0, 1) shaped `N x 1 x H x W`.
pub fn forward<G: Graph<f32>>(
    g: &mut G,
    cfg: &ModelConfig,
    bound: &Bound<G::Value>,
    image: &G::Value,
) -> Result<G::Value> {
    let logits = forward_logits(g, cfg, bound, image)?;
    g.sigmoid(&logits)
}

/// Everything up to (not including) the final sigmoid.
pub fn forward_logits<G: Graph<f32>>(
    g: &mut G,
    cfg: &ModelConfig,
    bound: &Bound<G::Value>,
    image: &G::Value,
) -> Result<G::Value> {
    cfg.validate()?;
    let s = g.shape_of(image);
    if s.c != cfg.in_channels {
        return Err(Error::shape(
            "forward",
            format!("expected {} input channels, got {}", cfg.in_channels, s.c),
        ));
    }
    cfg.check_input_size(s.h, s.w)?;

    let x = match cfg.boundary {
        Boundary::Spsm => g.pixel_unshuffle(image, cfg.ratio())?,
        Boundary::Bilinear => {
            let f = cfg.boundary_factor();
            g.bilinear_resize(image, s.h / f, s.w / f)?
        }
    };
    let stem = conv_layer(g, bound, "stem", ConvKind::Dense, &x, true)?;

    let stages = cfg.num_stages();
    let mut encoded = Vec::with_capacity(stages);
    encoded.push(trsu_forward(
        g,
        bound,
        "enc0",
        &stem,
        cfg.trsu_depths[0],
        ConvKind::Dense,
    )?);
    for i in 1..stages {
        let pooled = g.maxpool2d(&encoded[i - 1], 2, 2)?;
        let e = trsu_forward(
            g,
            bound,
            &format!("enc{i}"),
            &pooled,
            cfg.trsu_depths[i],
            ConvKind::Dense,
        )?;
        encoded.push(e);
    }

    let mut d = midblock_forward(g, bound, &encoded[stages - 1], cfg.mid_block_layers)?;
    for i in (0..stages).rev() {
        let skip = &encoded[i];
        let ss = g.shape_of(skip);
        if g.shape_of(&d).h != ss.h {
            d = g.bilinear_resize(&d, ss.h, ss.w)?;
        }
        let merged = g.add(&d, skip)?;
        d = trsu_forward(
            g,
            bound,
            &format!("dec{i}"),
            &merged,
            cfg.trsu_depths[i],
            ConvKind::Separable,
        )?;
    }

    let head = conv_layer(g, bound, "head", ConvKind::Dense, &d, false)?;
    match cfg.boundary {
        Boundary::Spsm => g.pixel_shuffle(&head, cfg.ratio()),
        Boundary::Bilinear => g.bilinear_resize(&head, s.h, s.w),
    }
}
