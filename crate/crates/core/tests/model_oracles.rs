use std::collections::BTreeMap;

use psunet::model::{
    build_psunet, conv_layer, midblock_forward, trsu_forward, Boundary, ConvKind, MacProbe,
    ModelConfig, PsuNet,
};
use psunet::ops::{
    bilinear_resize, conv2d, depthwise_separable_conv, maxpool2d, pixel_shuffle, pixel_unshuffle,
    ConvGeom, ConvWeights,
};
use psunet::{Eval, Graph, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Params = BTreeMap<String, Tensor<f32>>;

fn randomized(cfg: ModelConfig, seed: u64) -> PsuNet {
    let model = build_psunet(cfg, 0).unwrap();
    let (cfg, mut params) = model.into_parts();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.3..0.3));
    }
    PsuNet::from_parts(cfg, params).unwrap()
}

fn image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let data: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_slice([1, c, h, w], &data).unwrap()
}

fn dense(p: &Params, name: &str, x: &Tensor<f32>) -> Tensor<f32> {
    let w = ConvWeights::new(
        p[&format!("{name}.weight")].clone(),
        Some(p[&format!("{name}.bias")].clone()),
        ConvGeom::same(3),
    )
    .unwrap();
    conv2d(x, &w).unwrap()
}

fn sep(p: &Params, name: &str, x: &Tensor<f32>) -> Tensor<f32> {
    let dw = ConvWeights::new(
        p[&format!("{name}.dw.weight")].clone(),
        Some(p[&format!("{name}.dw.bias")].clone()),
        ConvGeom::same(3),
    )
    .unwrap();
    let pw = ConvWeights::new(
        p[&format!("{name}.pw.weight")].clone(),
        Some(p[&format!("{name}.pw.bias")].clone()),
        ConvGeom::new(1, 0),
    )
    .unwrap();
    depthwise_separable_conv(x, &dw, &pw).unwrap()
}

fn block(p: &Params, prefix: &str, x: &Tensor<f32>, depth: usize, dense_ends: bool) -> Tensor<f32> {
    let ends = |name: &str, x: &Tensor<f32>| {
        if dense_ends {
            dense(p, name, x)
        } else {
            sep(p, name, x)
        }
    };
    let entry = ends(&format!("{prefix}.entry"), x).relu();
    let mut skips = Vec::new();
    let mut cur = entry.clone();
    for k in 1..=depth {
        let a = sep(p, &format!("{prefix}.down{k}"), &cur).relu();
        cur = maxpool2d(&a, 2, 2).unwrap();
        skips.push(a);
    }
    cur = sep(p, &format!("{prefix}.bottom1"), &cur).relu();
    cur = sep(p, &format!("{prefix}.bottom2"), &cur).relu();
    for k in (1..=depth).rev() {
        let s = skips[k - 1].shape();
        let up = bilinear_resize(&cur, s.h, s.w).unwrap();
        cur = sep(
            p,
            &format!("{prefix}.up{k}"),
            &up.add(&skips[k - 1]).unwrap(),
        )
        .relu();
    }
    ends(&format!("{prefix}.exit"), &cur)
        .add(&entry)
        .unwrap()
        .relu()
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

fn toy() -> ModelConfig {
    ModelConfig {
        stage_widths: vec![4, 8],
        trsu_depths: vec![2, 1],
        trsu_mid_widths: vec![2, 4],
        mid_block_layers: 2,
        ..ModelConfig::tiny()
    }
}

#[test]
fn forward_matches_hand_chained_ops() {
    let model = randomized(toy(), 5);
    let p = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = image(&mut rng, 3, 16, 24);
    let ratio = model.config().ratio();

    let stem = dense(p, "stem", &pixel_unshuffle(&x, ratio).unwrap()).relu();
    let e0 = block(p, "enc0", &stem, 2, true);
    let e1 = block(p, "enc1", &maxpool2d(&e0, 2, 2).unwrap(), 1, true);
    let m0 = sep(p, "mid.layer0", &e1).relu();
    let mid = sep(p, "mid.layer1", &m0).add(&e1).unwrap().relu();
    let d1 = block(p, "dec1", &mid.add(&e1).unwrap(), 1, false);
    let up = bilinear_resize(&d1, e0.shape().h, e0.shape().w).unwrap();
    let d0 = block(p, "dec0", &up.add(&e0).unwrap(), 2, false);
    let expected = pixel_shuffle(&dense(p, "head", &d0), ratio)
        .unwrap()
        .sigmoid();

    let got = model.forward(&x).unwrap();
    assert_eq!(got.shape(), Shape::new(1, 1, 16, 24).unwrap());
    assert!(
        max_diff(&got, &expected) < 1e-5,
        "diff {}",
        max_diff(&got, &expected)
    );
}

#[test]
fn bilinear_boundary_matches_hand_chained_ops() {
    let cfg = ModelConfig {
        t: 1,
        boundary: Boundary::Bilinear,
        ..toy()
    };
    let model = randomized(cfg, 8);
    let p = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = image(&mut rng, 3, 16, 16);
    let stem = dense(p, "stem", &bilinear_resize(&x, 8, 8).unwrap()).relu();
    let e0 = block(p, "enc0", &stem, 2, true);
    let e1 = block(p, "enc1", &maxpool2d(&e0, 2, 2).unwrap(), 1, true);
    let m0 = sep(p, "mid.layer0", &e1).relu();
    let mid = sep(p, "mid.layer1", &m0).add(&e1).unwrap().relu();
    let d1 = block(p, "dec1", &mid.add(&e1).unwrap(), 1, false);
    let up = bilinear_resize(&d1, 8, 8).unwrap();
    let d0 = block(p, "dec0", &up.add(&e0).unwrap(), 2, false);
    let expected = bilinear_resize(&dense(p, "head", &d0), 16, 16)
        .unwrap()
        .sigmoid();
    assert!(max_diff(&model.forward(&x).unwrap(), &expected) < 1e-5);
}

#[test]
fn midblock_is_chained_separable_convs_plus_residual() {
    let model = randomized(ModelConfig::tiny(), 3);
    let p = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = image(&mut rng, 16, 4, 4);
    let mut g = Eval::new();
    let bound = model.bind(&mut g);
    let got = midblock_forward(&mut g, &bound, &x, 2).unwrap();
    let h = sep(p, "mid.layer0", &x).relu();
    let expected = sep(p, "mid.layer1", &h).add(&x).unwrap().relu();
    assert!(max_diff(&got, &expected) < 1e-6);
}

#[test]
fn zero_exit_returns_entry() {
    let mut model = randomized(ModelConfig::tiny(), 11);
    for name in ["enc0.exit.weight", "enc0.exit.bias"] {
        model
            .params_mut()
            .get_mut(name)
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = image(&mut rng, 8, 8, 8);
    let mut g = Eval::new();
    let bound = model.bind(&mut g);
    let out = trsu_forward(&mut g, &bound, "enc0", &x, 2, ConvKind::Dense).unwrap();
    let entry = conv_layer(&mut g, &bound, "enc0.entry", ConvKind::Dense, &x, true).unwrap();
    assert_eq!(out.data(), entry.data());
}

#[test]
fn separable_conv_equals_expanded_dense_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (ci, co) = (3, 5);
    let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let x = Tensor::from_slice([2, ci, 6, 7], &rand(2 * ci * 42)).unwrap();
    let dw = rand(ci * 9);
    let dwb = rand(ci);
    let pw = rand(co * ci);
    let pwb = rand(co);

    let mut kernel = vec![0.0; co * ci * 9];
    let mut bias = pwb.clone();
    for o in 0..co {
        for i in 0..ci {
            for k in 0..9 {
                kernel[(o * ci + i) * 9 + k] = pw[o * ci + i] * dw[i * 9 + k];
            }
            bias[o] += pw[o * ci + i] * dwb[i];
        }
    }
    let dense = ConvWeights::new(
        Tensor::from_slice([co, ci, 3, 3], &kernel).unwrap(),
        Some(Tensor::from_slice([1, co, 1, 1], &bias).unwrap()),
        ConvGeom::same(3),
    )
    .unwrap();
    let depthwise = ConvWeights::new(
        Tensor::from_slice([ci, 1, 3, 3], &dw).unwrap(),
        Some(Tensor::from_slice([1, ci, 1, 1], &dwb).unwrap()),
        ConvGeom::same(3),
    )
    .unwrap();
    let pointwise = ConvWeights::new(
        Tensor::from_slice([co, ci, 1, 1], &pw).unwrap(),
        Some(Tensor::from_slice([1, co, 1, 1], &pwb).unwrap()),
        ConvGeom::new(1, 0),
    )
    .unwrap();
    let a = depthwise_separable_conv(&x, &depthwise, &pointwise).unwrap();
    let b = conv2d(&x, &dense).unwrap();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "diff {diff}");
}

#[test]
fn depth_three_bottleneck_is_two_by_two() {
    let cfg = ModelConfig {
        trsu_depths: vec![3, 1],
        ..ModelConfig::tiny()
    };
    let model = build_psunet(cfg, 0).unwrap();
    let mut probe = MacProbe::default();
    let bound = model.bind(&mut probe);
    let x = Shape::new(1, 8, 16, 16).unwrap();
    trsu_forward(&mut probe, &bound, "enc0", &x, 3, ConvKind::Dense).unwrap();
    // entry/exit dense at 16², down1 8->8 at 16², down2/3 at 8²/4², bottoms at 2², up3/2/1 at 4²/8²/16²
    let sep = |ci: u64, co: u64, side: u64| (9 * ci + ci * co) * side * side;
    let dense = |ci: u64, co: u64, side: u64| 9 * ci * co * side * side;
    let expected = dense(8, 8, 16) * 2
        + sep(8, 8, 16)
        + sep(8, 8, 8)
        + sep(8, 8, 4)
        + 2 * sep(8, 8, 2)
        + sep(8, 8, 4)
        + sep(8, 8, 8)
        + sep(8, 8, 16);
    assert_eq!(probe.macs, expected);
    let too_deep = ModelConfig {
        trsu_depths: vec![5, 1],
        ..ModelConfig::tiny()
    };
    let m = build_psunet(too_deep, 0).unwrap();
    let mut probe = MacProbe::default();
    let bound = m.bind(&mut probe);
    assert!(trsu_forward(
        &mut probe,
        &bound,
        "enc0",
        &Shape::new(1, 8, 16, 16).unwrap(),
        5,
        ConvKind::Dense
    )
    .is_err());
}

#[test]
fn tape_gives_every_parameter_a_gradient() {
    let model = randomized(toy(), 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = image(&mut rng, 3, 16, 16);
    let mut tape = psunet::Tape::<f32>::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let y = psunet::model::forward(&mut tape, model.config(), &bound, &xv).unwrap();
    let loss = tape.mean(&y).unwrap();
    tape.backward(&loss).unwrap();
    for (name, v) in &bound {
        let g = tape
            .grad(v)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert_eq!(g.len(), model.params()[name].numel(), "{name}");
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
    }
    for name in ["stem.weight", "head.weight", "head.bias"] {
        assert!(
            tape.grad(&bound[name]).unwrap().iter().any(|&v| v != 0.0),
            "{name}"
        );
    }
}
