//! Training objectives over saliency maps.
//!
//! Stage one minimises `bce + ssim + iou`; stage two fine-tunes with
//! `l1 + edge`. Every loss is built from [`Graph`] primitives so the same
//! code evaluates plainly, records onto a tape, or runs in `f64` for
//! gradient checking.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph};
use crate::error::{Error, Result};
use crate::ops::ConvGeom;
use crate::tensor::{Scalar, Shape, Tensor};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Added to the IoU denominator.
pub const IOU_EPS: f64 = 1e-7;
/// Added under the Sobel magnitude square root.
pub const EDGE_EPS: f64 = 1e-8;

/// Prediction and ground truth of identical `N x 1 x H x W` shape, both in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SaliencyPair<T = f32> {
    pred: Tensor<T>,
    target: Tensor<T>,
}

impl<T: Scalar> SaliencyPair<T> {
    pub fn new(pred: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "saliency_pair",
                left: pred.shape(),
                right: target.shape(),
            });
        }
        if pred.shape().c != 1 {
            return Err(Error::shape(
                "saliency_pair",
                format!("expected one channel, got {}", pred.shape()),
            ));
        }
        for (name, t) in [("prediction", &pred), ("ground truth", &target)] {
            if let Some(v) = t
                .data()
                .iter()
                .find(|v| !(**v >= T::zero() && **v <= T::one()))
            {
                return Err(Error::Domain {
                    op: "saliency_pair",
                    msg: format!("{name} value {v} outside [0, 1]"),
                });
            }
        }
        Ok(SaliencyPair { pred, target })
    }

    pub fn pred(&self) -> &Tensor<T> {
        &self.pred
    }

    pub fn target(&self) -> &Tensor<T> {
        &self.target
    }

    pub fn shape(&self) -> Shape {
        self.pred.shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    /// Normalised 2-D Gaussian as a `1 x 1 x k x k` kernel.
    pub fn gaussian_window<T: Scalar>(&self) -> Tensor<T> {
        let k = self.window;
        let center = (k / 2) as f64;
        let g: Vec<f64> = (0..k)
            .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        let mut data = Vec::with_capacity(k * k);
        for gy in &g {
            for gx in &g {
                data.push(T::lit(gy * gx / (total * total)));
            }
        }
        Tensor::from_slice([1, 1, k, k], &data).expect("window shape")
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssim window must be odd, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("ssim sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Which stage-one terms contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bce: bool,
    pub ssim: bool,
    pub iou: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms {
            bce: true,
            ssim: true,
            iou: true,
        }
    }
}

impl LossTerms {
    pub const BCE: LossTerms = LossTerms {
        bce: true,
        ssim: false,
        iou: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.bce {
            parts.push("BCE");
        }
        if self.ssim {
            parts.push("SSIM");
        }
        if self.iou {
            parts.push("IoU");
        }
        parts.join(" + ")
    }

    pub fn is_empty(&self) -> bool {
        !(self.bce || self.ssim || self.iou)
    }
}

/// Stage-two weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MattingWeights {
    pub l1: f64,
    pub edge: f64,
}

impl Default for MattingWeights {
    fn default() -> Self {
        MattingWeights { l1: 1.0, edge: 1.0 }
    }
}

/// A total loss together with the components that produced it.
#[derive(Debug, Clone)]
pub struct LossParts<V> {
    pub total: V,
    pub components: Vec<(&'static str, V)>,
}

fn check_pair<T: Scalar, G: Graph<T>>(
    g: &G,
    op: &'static str,
    pred: &G::Value,
    target: &G::Value,
) -> Result<Shape> {
    let (ps, ts) = (g.shape_of(pred), g.shape_of(target));
    if ps != ts {
        return Err(Error::ShapeMismatch {
            op,
            left: ps,
            right: ts,
        });
    }
    Ok(ps)
}

/// `1 - x`
fn one_minus<T: Scalar, G: Graph<T>>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let neg = g.scalar_mul(x, -T::one())?;
    g.add_scalar(&neg, T::one())
}

/// Binary cross entropy summed over pixels, averaged over the batch.
pub fn bce<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
) -> Result<G::Value> {
    let shape = check_pair(g, "bce_loss", pred, target)?;
    let p = g.clamp(pred, T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS))?;
    let log_p = g.log(&p)?;
    let q = one_minus(g, &p)?;
    let log_q = g.log(&q)?;
    let inv_target = one_minus(g, target)?;
    let pos = g.mul(target, &log_p)?;
    let neg = g.mul(&inv_target, &log_q)?;
    let ll = g.add(&pos, &neg)?;
    let total = g.sum(&ll)?;
    g.scalar_mul(&total, T::lit(-1.0 / shape.n as f64))
}

/// `1 - mean(SSIM map)` with Gaussian local statistics over valid windows.
/// Maps smaller than the window use one uniform window covering the map.
pub fn ssim<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
    cfg: &SsimConfig,
) -> Result<G::Value> {
    cfg.validate()?;
    let shape = check_pair(g, "ssim_loss", pred, target)?;
    if shape.c != 1 {
        return Err(Error::shape(
            "ssim_loss",
            format!("expected one channel, got {shape}"),
        ));
    }
    let window = if shape.h >= cfg.window && shape.w >= cfg.window {
        cfg.gaussian_window::<T>()
    } else {
        let n = shape.plane();
        Tensor::full(Shape::new(1, 1, shape.h, shape.w)?, T::lit(1.0 / n as f64))
    };
    let window = g.constant(window);
    let valid = ConvGeom::new(1, 0);
    let filter = |g: &mut G, v: &G::Value| g.depthwise_conv2d(v, &window, None, valid);

    let mu_x = filter(g, pred)?;
    let mu_y = filter(g, target)?;
    let xx = g.square(pred)?;
    let yy = g.square(target)?;
    let xy = g.mul(pred, target)?;
    let e_xx = filter(g, &xx)?;
    let e_yy = filter(g, &yy)?;
    let e_xy = filter(g, &xy)?;

    let mu_x2 = g.square(&mu_x)?;
    let mu_y2 = g.square(&mu_y)?;
    let mu_xy = g.mul(&mu_x, &mu_y)?;
    let var_x = g.sub(&e_xx, &mu_x2)?;
    let var_y = g.sub(&e_yy, &mu_y2)?;
    let cov = g.sub(&e_xy, &mu_xy)?;

    let c1 = T::lit(cfg.c1);
    let c2 = T::lit(cfg.c2);
    let two = T::lit(2.0);
    let lum_num = g.scalar_mul(&mu_xy, two)?;
    let lum_num = g.add_scalar(&lum_num, c1)?;
    let cs_num = g.scalar_mul(&cov, two)?;
    let cs_num = g.add_scalar(&cs_num, c2)?;
    let lum_den = g.add(&mu_x2, &mu_y2)?;
    let lum_den = g.add_scalar(&lum_den, c1)?;
    let cs_den = g.add(&var_x, &var_y)?;
    let cs_den = g.add_scalar(&cs_den, c2)?;
    let num = g.mul(&lum_num, &cs_num)?;
    let den = g.mul(&lum_den, &cs_den)?;
    let map = g.div(&num, &den)?;
    let mean = g.mean(&map)?;
    one_minus(g, &mean)
}

/// `1 - ΣPG / Σ(P + G - PG)` per map, averaged over the batch.
pub fn iou<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
) -> Result<G::Value> {
    check_pair(g, "iou_loss", pred, target)?;
    let pg = g.mul(pred, target)?;
    let inter = g.sum_per_sample(&pg)?;
    let both = g.add(pred, target)?;
    let union = g.sub(&both, &pg)?;
    let union = g.sum_per_sample(&union)?;
    let union = g.add_scalar(&union, T::lit(IOU_EPS))?;
    let ratio = g.div(&inter, &union)?;
    let mean = g.mean(&ratio)?;
    one_minus(g, &mean)
}

/// Unweighted sum of the selected stage-one terms.
pub fn hybrid<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
    terms: LossTerms,
    ssim_cfg: &SsimConfig,
) -> Result<LossParts<G::Value>> {
    if terms.is_empty() {
        return Err(Error::Config(
            "at least one loss term must be enabled".into(),
        ));
    }
    let mut components = Vec::with_capacity(3);
    if terms.bce {
        components.push(("bce", bce(g, pred, target)?));
    }
    if terms.ssim {
        components.push(("ssim", ssim(g, pred, target, ssim_cfg)?));
    }
    if terms.iou {
        components.push(("iou", iou(g, pred, target)?));
    }
    let total = sum_values(g, &components)?;
    Ok(LossParts { total, components })
}

fn sum_values<T: Scalar, G: Graph<T>>(
    g: &mut G,
    parts: &[(&'static str, G::Value)],
) -> Result<G::Value> {
    let mut iter = parts.iter();
    let (_, first) = iter
        .next()
        .ok_or_else(|| Error::Config("empty loss".into()))?;
    let mut total = g.scalar_mul(first, T::one())?;
    for (_, v) in iter {
        total = g.add(&total, v)?;
    }
    Ok(total)
}

/// Mean absolute difference over all pixels and the batch.
pub fn l1<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
) -> Result<G::Value> {
    check_pair(g, "l1_loss", pred, target)?;
    let d = g.sub(pred, target)?;
    let a = g.abs(&d)?;
    g.mean(&a)
}

pub fn sobel_kernels<T: Scalar>() -> (Tensor<T>, Tensor<T>) {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mk = |k: [f64; 9]| {
        Tensor::from_vec(
            Shape::new(1, 1, 3, 3).unwrap(),
            k.iter().map(|&v| T::lit(v)).collect(),
        )
        .unwrap()
    };
    (mk(gx), mk(gy))
}

fn sobel_magnitude<T: Scalar, G: Graph<T>>(
    g: &mut G,
    x: &G::Value,
    kx: &G::Value,
    ky: &G::Value,
) -> Result<G::Value> {
    let valid = ConvGeom::new(1, 0);
    let gx = g.conv2d(x, kx, None, valid)?;
    let gy = g.conv2d(x, ky, None, valid)?;
    let gx2 = g.square(&gx)?;
    let gy2 = g.square(&gy)?;
    let s = g.add(&gx2, &gy2)?;
    let s = g.add_scalar(&s, T::lit(EDGE_EPS))?;
    g.sqrt(&s)
}

/// Mean absolute difference of Sobel gradient magnitudes over interior pixels.
pub fn edge<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
) -> Result<G::Value> {
    let shape = check_pair(g, "edge_loss", pred, target)?;
    if shape.h < 3 || shape.w < 3 {
        return Err(Error::shape(
            "edge_loss",
            format!("map {}x{} smaller than 3x3", shape.h, shape.w),
        ));
    }
    if shape.c != 1 {
        return Err(Error::shape(
            "edge_loss",
            format!("expected one channel, got {shape}"),
        ));
    }
    let (kx, ky) = sobel_kernels::<T>();
    let kx = g.constant(kx);
    let ky = g.constant(ky);
    let mp = sobel_magnitude(g, pred, &kx, &ky)?;
    let mt = sobel_magnitude(g, target, &kx, &ky)?;
    let d = g.sub(&mp, &mt)?;
    let a = g.abs(&d)?;
    g.mean(&a)
}

/// Stage-two objective: weighted `l1 + edge`.
pub fn matting<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &G::Value,
    weights: MattingWeights,
) -> Result<LossParts<G::Value>> {
    let l = l1(g, pred, target)?;
    let e = edge(g, pred, target)?;
    let lw = g.scalar_mul(&l, T::lit(weights.l1))?;
    let ew = g.scalar_mul(&e, T::lit(weights.edge))?;
    let total = g.add(&lw, &ew)?;
    Ok(LossParts {
        total,
        components: vec![("l1", l), ("edge", e)],
    })
}

fn eval_pair<T: Scalar>(
    pair: &SaliencyPair<T>,
    f: impl FnOnce(&mut Eval<T>, &Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
) -> Result<T> {
    let mut g = Eval::new();
    let out = f(&mut g, &pair.pred, &pair.target)?;
    out.item().ok_or_else(|| Error::NonScalarLoss(out.shape()))
}

pub fn bce_loss<T: Scalar>(pair: &SaliencyPair<T>) -> Result<T> {
    eval_pair(pair, |g, p, t| bce(g, p, t))
}

pub fn ssim_loss<T: Scalar>(pair: &SaliencyPair<T>, cfg: &SsimConfig) -> Result<T> {
    eval_pair(pair, |g, p, t| ssim(g, p, t, cfg))
}

pub fn iou_loss<T: Scalar>(pair: &SaliencyPair<T>) -> Result<T> {
    eval_pair(pair, |g, p, t| iou(g, p, t))
}

pub fn hybrid_loss<T: Scalar>(pair: &SaliencyPair<T>) -> Result<T> {
    eval_pair(pair, |g, p, t| {
        Ok(hybrid(g, p, t, LossTerms::default(), &SsimConfig::default())?.total)
    })
}

pub fn l1_loss<T: Scalar>(pair: &SaliencyPair<T>) -> Result<T> {
    eval_pair(pair, |g, p, t| l1(g, p, t))
}

pub fn edge_loss<T: Scalar>(pair: &SaliencyPair<T>) -> Result<T> {
    eval_pair(pair, |g, p, t| edge(g, p, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(dims: [usize; 4], p: &[f64], t: &[f64]) -> SaliencyPair<f64> {
        SaliencyPair::new(
            Tensor::from_slice(dims, p).unwrap(),
            Tensor::from_slice(dims, t).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pair_validation() {
        let a = Tensor::from_slice([1, 1, 1, 2], &[0.5f32, 1.5]).unwrap();
        let b = Tensor::from_slice([1, 1, 1, 2], &[0.5f32, 0.5]).unwrap();
        assert!(SaliencyPair::new(a, b.clone()).is_err());
        let c = Tensor::from_slice([1, 1, 2, 1], &[0.5f32, 0.5]).unwrap();
        assert!(matches!(
            SaliencyPair::new(b, c),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bce_examples() {
        let v = bce_loss(&pair([1, 1, 1, 1], &[0.5], &[1.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&pair([1, 1, 2, 2], &[0.5; 4], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!((v - 2.772_588_722_239_781).abs() < 1e-12);
        let v = bce_loss(&pair(
            [1, 1, 2, 2],
            &[1.0, 0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0, 1.0],
        ))
        .unwrap();
        assert!(v.abs() < 1e-4);
    }

    #[test]
    fn bce_batch_mean() {
        let one = bce_loss(&pair([1, 1, 1, 2], &[0.3, 0.8], &[0.0, 1.0])).unwrap();
        let two = bce_loss(&pair(
            [2, 1, 1, 2],
            &[0.3, 0.8, 0.3, 0.8],
            &[0.0, 1.0, 0.0, 1.0],
        ))
        .unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        assert!(
            iou_loss(&pair([1, 1, 2, 2], &[1.0; 4], &[1.0; 4]))
                .unwrap()
                .abs()
                < 1e-7
        );
        assert!((iou_loss(&pair([1, 1, 2, 2], &[0.5; 4], &[1.0; 4])).unwrap() - 0.5).abs() < 1e-6);
        assert!((iou_loss(&pair([1, 1, 2, 2], &[0.0; 4], &[1.0; 4])).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn ssim_constant_maps_closed_form() {
        let cfg = SsimConfig::default();
        let p = pair([1, 1, 12, 12], &[1.0; 144], &[0.0; 144]);
        let v = ssim_loss(&p, &cfg).unwrap();
        let expected = 1.0 - cfg.c1 / (1.0 + cfg.c1);
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }

    #[test]
    fn ssim_small_map_uses_global_window() {
        let p = pair([1, 1, 2, 2], &[0.1, 0.9, 0.4, 0.2], &[0.1, 0.9, 0.4, 0.2]);
        assert!(ssim_loss(&p, &SsimConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        let w = SsimConfig::default().gaussian_window::<f64>();
        assert!((w.sum_all() - 1.0).abs() < 1e-12);
        assert_eq!(w.shape(), Shape::new(1, 1, 11, 11).unwrap());
        let even = SsimConfig {
            window: 10,
            ..Default::default()
        };
        let p = pair([1, 1, 12, 12], &[1.0; 144], &[0.0; 144]);
        assert!(ssim_loss(&p, &even).is_err());
    }

    #[test]
    fn l1_and_edge_basics() {
        assert!(
            (l1_loss(&pair([1, 1, 2, 2], &[0.25; 4], &[0.75; 4])).unwrap() - 0.5).abs() < 1e-12
        );
        let flat = pair([1, 1, 4, 4], &[0.3; 16], &[0.7; 16]);
        assert!(edge_loss(&flat).unwrap().abs() < 1e-12);
        let tiny = pair([1, 1, 2, 4], &[0.3; 8], &[0.7; 8]);
        assert!(edge_loss(&tiny).is_err());
    }

    #[test]
    fn empty_term_set_rejected() {
        let mut g = Eval::<f64>::new();
        let p = Tensor::from_slice([1, 1, 1, 1], &[0.5]).unwrap();
        let none = LossTerms {
            bce: false,
            ssim: false,
            iou: false,
        };
        assert!(hybrid(&mut g, &p, &p, none, &SsimConfig::default()).is_err());
        assert_eq!(LossTerms::default().label(), "BCE + SSIM + IoU");
    }
}
