//! Image and mask files: PNG and binary PGM/PPM, 8-bit.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// 1x3xHxW, values `v / 255`.
    pub pixels: Tensor<f32>,
    pub height: usize,
    pub width: usize,
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        _ => return Err(Error::UnsupportedFormat { path: path.into() }),
    }
    reader.decode().map_err(|e| Error::Decode {
        path: path.into(),
        msg: e.to_string(),
    })
}

fn to_unit(v: u8) -> f32 {
    f32::from(v) / 255.0
}

/// Loads an RGB image; grayscale inputs are replicated to three channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = to_unit(px.0[c]);
        }
    }
    Ok(ImageRecord {
        path: path.into(),
        pixels: Tensor::from_vec(Shape::new(1, 3, h, w)?, data)?,
        height: h,
        width: w,
    })
}

/// Loads a mask as 1x1xHxW. Colour files are reduced to luma.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.as_raw().iter().copied().map(to_unit).collect();
    Tensor::from_vec(Shape::new(1, 1, h, w)?, data)
}

fn mask_format(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat { path: path.into() }),
    }
}

/// Writes the first map of `mask` as 8-bit grayscale, `round(v * 255)`
/// clamped to [0, 255]. The file appears atomically.
pub fn save_mask(mask: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = mask_format(path)?;
    let s = mask.shape();
    if s.c != 1 {
        return Err(Error::shape(
            "save_mask",
            format!("expected one channel, got {s}"),
        ));
    }
    let bytes: Vec<u8> = mask.data()[..s.plane()]
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = GrayImage::from_raw(s.w as u32, s.h as u32, bytes).expect("buffer sized to plane");
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, format).map_err(|e| Error::Encode {
        path: path.into(),
        msg: e.to_string(),
    })?;
    write_atomic(path, buf.get_ref())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Regular files in `dir` with a supported image extension, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let supported = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| {
                matches!(
                    e.to_ascii_lowercase().as_str(),
                    "png" | "pgm" | "ppm" | "pnm"
                )
            })
            .unwrap_or(false);
        if supported && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
