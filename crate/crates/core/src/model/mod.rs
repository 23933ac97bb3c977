//! PSUNet: a pixel-shuffle boundary around a U-shaped stack of tiny residual
//! U-blocks.

mod config;
mod count;
mod network;
mod probe;

pub use config::{Boundary, ModelConfig, BILINEAR_FACTOR};
pub use count::{count_macs, count_params};
pub use network::{
    conv_layer, forward, forward_logits, layer_plan, midblock_forward, param_shapes, trsu_forward,
    Bound, ConvKind, LayerDef, ParamStore, PsuNet,
};
pub use probe::MacProbe;

use crate::error::Result;
use crate::ops::bilinear_resize;
use crate::tensor::{Shape, Tensor};

pub fn build_psunet(config: ModelConfig, seed: u64) -> Result<PsuNet> {
    PsuNet::build(config, seed)
}

/// MACs measured by running the forward pass on shapes alone.
pub fn probe_macs(model: &PsuNet, h: usize, w: usize) -> Result<u64> {
    let mut g = MacProbe::new();
    let bound = model.bind(&mut g);
    let cfg = model.config();
    let input: Shape = Shape::new(1, cfg.in_channels, h, w)?;
    let out = forward(&mut g, cfg, &bound, &input)?;
    debug_assert_eq!(out, Shape { n: 1, c: 1, h, w });
    Ok(g.macs)
}

/// Output shape of the network for an input shape, without computing values.
pub fn output_shape(model: &PsuNet, input: Shape) -> Result<Shape> {
    let mut g = MacProbe::new();
    let bound = model.bind(&mut g);
    forward(&mut g, model.config(), &bound, &input)
}

/// Runs the network on `image` resized to `size x size` and resizes the map
/// back to the image's original height and width.
pub fn predict_resized(model: &PsuNet, image: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    let x = bilinear_resize(image, size, size)?;
    let y = model.forward(&x)?;
    bilinear_resize(&y, s.h, s.w)
}
