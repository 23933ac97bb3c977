use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::bilinear_resize;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize_to: usize,
    pub crop_to: usize,
    /// Off means the crop window is centred.
    pub random_crop: bool,
    pub hflip_p: f64,
    pub resize_small_p: f64,
    /// Shrink factors are drawn from `[shrink_min, 1)`.
    pub shrink_min: f64,
    pub noise_p: f64,
    /// Noise standard deviations are drawn from `[0, noise_sigma_max]`.
    pub noise_sigma_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_to: 680,
            crop_to: 640,
            random_crop: true,
            hflip_p: 0.5,
            resize_small_p: 0.3,
            shrink_min: 0.5,
            noise_p: 0.3,
            noise_sigma_max: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Resize and centre crop to `size` with every random transform off.
    pub fn plain(size: usize) -> Self {
        AugmentConfig {
            resize_to: size,
            crop_to: size,
            random_crop: false,
            hflip_p: 0.0,
            resize_small_p: 0.0,
            noise_p: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return Err(Error::Config(format!(
                "need 1 <= crop_to <= resize_to, got crop_to {} resize_to {}",
                self.crop_to, self.resize_to
            )));
        }
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("resize_small_p", self.resize_small_p),
            ("noise_p", self.noise_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        if !(self.shrink_min > 0.0 && self.shrink_min < 1.0) || !(self.noise_sigma_max >= 0.0) {
            return Err(Error::Config(
                "shrink_min must be in (0, 1) and noise_sigma_max >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn crop(x: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, size, size)?;
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            for y in top..top + size {
                let start = s.index(n, c, y, left);
                out.extend_from_slice(&x.data()[start..start + size]);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Places `x` on a zero canvas of side `size` at (`top`, `left`).
fn pad_into(x: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, size, size)?;
    let mut out = Tensor::zeros(out_shape);
    let data = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let src = s.index(n, c, y, 0);
                let dst = out_shape.index(n, c, y + top, left);
                data[dst..dst + s.w].copy_from_slice(&x.data()[src..src + s.w]);
            }
        }
    }
    Ok(out)
}

/// Paired augmentation. Geometric transforms hit image and label identically;
/// noise touches only the image.
pub fn augment<R: Rng>(
    image: &Tensor<f32>,
    label: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    cfg.validate()?;
    let (is, ls) = (image.shape(), label.shape());
    if is.n != ls.n || is.h != ls.h || is.w != ls.w {
        return Err(Error::ShapeMismatch {
            op: "augment",
            left: is,
            right: ls,
        });
    }
    let r = cfg.resize_to;
    let mut img = bilinear_resize(image, r, r)?;
    let mut lab = bilinear_resize(label, r, r)?;

    let slack = r - cfg.crop_to;
    let (top, left) = if cfg.random_crop {
        (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
    } else {
        (slack / 2, slack / 2)
    };
    if slack > 0 {
        img = crop(&img, top, left, cfg.crop_to)?;
        lab = crop(&lab, top, left, cfg.crop_to)?;
    }

    if rng.gen::<f64>() < cfg.hflip_p {
        img = img.flip_horizontal();
        lab = lab.flip_horizontal();
    }

    if rng.gen::<f64>() < cfg.resize_small_p {
        let c = cfg.crop_to;
        let factor = rng.gen_range(cfg.shrink_min..1.0);
        let small = ((c as f64 * factor).round() as usize).clamp(1, c);
        let top = rng.gen_range(0..=c - small);
        let left = rng.gen_range(0..=c - small);
        img = pad_into(&bilinear_resize(&img, small, small)?, top, left, c)?;
        lab = pad_into(&bilinear_resize(&lab, small, small)?, top, left, c)?;
    }

    if rng.gen::<f64>() < cfg.noise_p {
        let sigma = rng.gen_range(0.0..=cfg.noise_sigma_max);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in img.data_mut() {
                *v = (f64::from(*v) + normal.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        let shape = Shape::new(1, c, h, w).unwrap();
        Tensor::from_vec(
            shape,
            (0..shape.numel()).map(|i| (i % 97) as f32 / 96.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn disabled_pipeline_is_resize_and_centre_crop() {
        let img = ramp(3, 10, 10);
        let lab = ramp(1, 10, 10);
        let cfg = AugmentConfig {
            resize_to: 10,
            crop_to: 6,
            ..AugmentConfig::plain(10)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment(&img, &lab, &cfg, &mut rng).unwrap();
        assert_eq!(a.shape(), Shape::new(1, 3, 6, 6).unwrap());
        assert_eq!(a.at(0, 1, 0, 0), img.at(0, 1, 2, 2));
        assert_eq!(b.at(0, 0, 5, 5), lab.at(0, 0, 7, 7));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let img = ramp(3, 12, 9);
        let lab = ramp(1, 12, 9);
        let cfg = AugmentConfig {
            resize_to: 12,
            crop_to: 8,
            hflip_p: 0.5,
            resize_small_p: 0.5,
            noise_p: 0.5,
            ..AugmentConfig::default()
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| augment(&img, &lab, &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(9), run(9));
        for ((x0, y0), (x1, y1)) in a.iter().zip(&b) {
            assert_eq!(x0.data(), x1.data());
            assert_eq!(y0.data(), y1.data());
        }
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = augment(
            &ramp(3, 8, 8),
            &ramp(1, 8, 6),
            &AugmentConfig::plain(8),
            &mut rng,
        );
        assert!(r.is_err());
    }
}
