use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{list_images, load_image, load_mask, save_mask, write_atomic};
use crate::tensor::{Shape, Tensor};

/// One training pair: `1x3xHxW` image and `1x1xHxW` label, both in [0, 1].
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Tensor<f32>, label: Tensor<f32>) -> Result<Self> {
        let (i, l) = (image.shape(), label.shape());
        if i.n != 1 || l.n != 1 || i.c != 3 || l.c != 1 || i.h != l.h || i.w != l.w {
            return Err(Error::ShapeMismatch {
                op: "sample",
                left: i,
                right: l,
            });
        }
        Ok(Sample {
            name: name.into(),
            image,
            label,
        })
    }
}

/// Pairs `<root>/images/*` with `<root>/masks/*` by file stem.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let stems = |dir: &Path| -> Result<BTreeMap<String, std::path::PathBuf>> {
        Ok(list_images(dir)?
            .into_iter()
            .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
            .collect())
    };
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    let mut out = Vec::new();
    for (name, img_path) in &images {
        let mask_path = masks.get(name).ok_or_else(|| {
            Error::Config(format!(
                "image {name} has no mask in {}",
                root.join("masks").display()
            ))
        })?;
        let rec = load_image(img_path)?;
        let label = load_mask(mask_path)?;
        out.push(Sample::new(name.clone(), rec.pixels, label)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no images found under {}",
            root.join("images").display()
        )));
    }
    Ok(out)
}

/// Writes samples as `<root>/images/<name>.png` and `<root>/masks/<name>.png`.
pub fn save_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    for sub in ["images", "masks"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    for s in samples {
        let path = root.join("images").join(format!("{}.png", s.name));
        let sh = s.image.shape();
        let plane = sh.plane();
        let d = s.image.data();
        let img = image::RgbImage::from_fn(sh.w as u32, sh.h as u32, |x, y| {
            let i = y as usize * sh.w + x as usize;
            let px = |c: usize| (d[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::Encode {
                path: path.clone(),
                msg: e.to_string(),
            })?;
        write_atomic(&path, buf.get_ref())?;
        save_mask(&s.label, root.join("masks").join(format!("{}.png", s.name)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Figure {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle([(f64, f64); 3]),
}

impl Figure {
    fn random<R: Rng>(rng: &mut R, size: f64) -> Self {
        let cx = rng.gen_range(0.3..0.7) * size;
        let cy = rng.gen_range(0.3..0.7) * size;
        let r = |rng: &mut R| rng.gen_range(0.12..0.3) * size;
        match rng.gen_range(0..3) {
            0 => Figure::Ellipse {
                cx,
                cy,
                rx: r(rng),
                ry: r(rng),
            },
            1 => {
                let (hw, hh) = (r(rng), r(rng));
                Figure::Rect {
                    x0: cx - hw,
                    y0: cy - hh,
                    x1: cx + hw,
                    y1: cy + hh,
                }
            }
            _ => {
                let rad = rng.gen_range(0.2..0.32) * size;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = |k: f64| {
                    let a = phase + k * std::f64::consts::TAU / 3.0;
                    (cx + rad * a.cos(), cy + rad * a.sin())
                };
                Figure::Triangle([v(0.0), v(1.0), v(2.0)])
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Figure::Ellipse { cx, cy, rx, ry } => {
                ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
            }
            Figure::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Figure::Triangle(p) => {
                let side = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Oriented sinusoid texture with a base colour.
struct Texture {
    base: [f64; 3],
    amp: f64,
    freq: f64,
    dir: (f64, f64),
    phase: f64,
}

impl Texture {
    fn random<R: Rng>(rng: &mut R, bright: bool) -> Self {
        let level = if bright { 0.55..0.85 } else { 0.15..0.45 };
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        Texture {
            base: [
                rng.gen_range(level.clone()),
                rng.gen_range(level.clone()),
                rng.gen_range(level),
            ],
            amp: rng.gen_range(0.04..0.12),
            freq: rng.gen_range(0.2..0.9),
            dir: (angle.cos(), angle.sin()),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn at(&self, x: f64, y: f64, c: usize) -> f64 {
        let wave = (self.freq * (x * self.dir.0 + y * self.dir.1) + self.phase + c as f64).sin();
        self.base[c] + self.amp * wave
    }
}

/// Geometric foreground shapes on textured backgrounds with binary labels.
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img_shape = Shape::new(1, 3, size, size)?;
    let lab_shape = Shape::new(1, 1, size, size)?;
    let plane = size * size;
    (0..count)
        .map(|k| {
            let bright_fg = rng.gen_bool(0.5);
            let bg = Texture::random(&mut rng, !bright_fg);
            let fg = Texture::random(&mut rng, bright_fg);
            let figure = Figure::random(&mut rng, size as f64);
            let mut img = vec![0.0f32; 3 * plane];
            let mut lab = vec![0.0f32; plane];
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let inside = figure.contains(fx, fy);
                    let tex = if inside { &fg } else { &bg };
                    for c in 0..3 {
                        let noise = rng.gen_range(-0.03..0.03);
                        img[c * plane + y * size + x] =
                            (tex.at(fx, fy, c) + noise).clamp(0.0, 1.0) as f32;
                    }
                    lab[y * size + x] = if inside { 1.0 } else { 0.0 };
                }
            }
            Sample::new(
                format!("synth_{k:04}"),
                Tensor::from_vec(img_shape, img)?,
                Tensor::from_vec(lab_shape, lab)?,
            )
        })
        .collect()
}
