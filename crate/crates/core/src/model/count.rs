//! Closed-form parameter and multiply-accumulate counts.
//!
//! Bias additions, pooling, resampling and activations are not counted as
//! MACs.

use super::config::ModelConfig;
use super::network::{layer_plan, ConvKind, LayerDef};
use crate::error::Result;

const TAPS: usize = 9;

fn layer_params(l: &LayerDef) -> usize {
    match l.kind {
        ConvKind::Dense => TAPS * l.c_in * l.c_out + l.c_out,
        ConvKind::Separable => TAPS * l.c_in + l.c_in + l.c_in * l.c_out + l.c_out,
    }
}

fn layer_macs_per_pixel(l: &LayerDef) -> usize {
    match l.kind {
        ConvKind::Dense => TAPS * l.c_in * l.c_out,
        ConvKind::Separable => TAPS * l.c_in + l.c_in * l.c_out,
    }
}

pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    Ok(layer_plan(cfg).iter().map(layer_params).sum())
}

/// MACs for one `h x w` image.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<u64> {
    cfg.check_input_size(h, w)?;
    let f = cfg.boundary_factor();
    let (h0, w0) = (h / f, w / f);
    let at = |level: usize| ((h0 >> level) * (w0 >> level)) as u64;

    let mut levels = vec![0usize];
    let trsu = |stage: usize, depth: usize, out: &mut Vec<usize>| {
        out.push(stage);
        out.extend((0..depth).map(|k| stage + k));
        out.extend([stage + depth; 2]);
        out.extend((0..depth).map(|k| stage + k));
        out.push(stage);
    };
    let s = cfg.num_stages();
    for i in 0..s {
        trsu(i, cfg.trsu_depths[i], &mut levels);
    }
    levels.extend(std::iter::repeat_n(s - 1, cfg.mid_block_layers));
    for i in (0..s).rev() {
        trsu(i, cfg.trsu_depths[i], &mut levels);
    }
    levels.push(0);

    let plan = layer_plan(cfg);
    debug_assert_eq!(plan.len(), levels.len());
    Ok(plan
        .iter()
        .zip(levels)
        .map(|(l, level)| layer_macs_per_pixel(l) as u64 * at(level))
        .sum())
}
