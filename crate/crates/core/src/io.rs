//! Atomic file writes and image/mask I/O.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// RGB image as `[3, H, W]` in `[0, 1]`. Grayscale inputs are replicated.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Binary mask `[1, H, W]`; pixels above mid-gray are crack.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| (p[0] > 127) as u8 as f64).collect();
    Tensor::new(&[1, h, w], data)
}

fn plane(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape(
            "write_mask",
            format!("{what} must be a single [H, W] plane, got {s:?}"),
        )),
    }
}

fn write_gray(path: &Path, h: usize, w: usize, f: impl Fn(usize) -> u8) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([f(y as usize * w + x as usize)])
    });
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?;
    write_atomic(path, &bytes)
}

/// 8-bit PNG with 255 where `probs >= threshold`, else 0.
pub fn write_mask(path: &Path, probs: &Tensor, threshold: f64) -> Result<()> {
    let (h, w) = plane(probs, "probabilities")?;
    write_gray(path, h, w, |i| {
        if probs.data()[i] >= threshold {
            255
        } else {
            0
        }
    })
}

/// 8-bit PNG of `round(255 p)`.
pub fn write_prob_map(path: &Path, probs: &Tensor) -> Result<()> {
    let (h, w) = plane(probs, "probabilities")?;
    write_gray(path, h, w, |i| {
        (probs.data()[i].clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

/// PNG and PGM files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "pgm" | "ppm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
