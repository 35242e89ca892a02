//! Image export and file helpers.
//!
//! Network outputs are clamped to [-1, 1] and quantized to 8 bits with
//! round-half-even, `q = round_half_even((v + 1) * 127.5)`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

/// A `[3, R, R]` (or `[1, 3, R, R]`) tensor as an RGB image.
pub fn to_rgb8(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected a [3, H, W] image, got {s:?}"))),
    };
    let d = t.data();
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])])
    }))
}

/// Tiles `rows x cols` equally sized images; `cells[row][col]`.
pub fn grid(cells: &[Vec<Tensor>]) -> Result<RgbImage> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Input("empty image grid".into()))?;
    let tile = to_rgb8(first)?;
    let (tw, th) = tile.dimensions();
    let cols = cells[0].len() as u32;
    let mut out = RgbImage::new(tw * cols, th * cells.len() as u32);
    for (row, line) in cells.iter().enumerate() {
        if line.len() as u32 != cols {
            return Err(Error::Input("ragged image grid".into()));
        }
        for (col, t) in line.iter().enumerate() {
            let img = to_rgb8(t)?;
            if img.dimensions() != (tw, th) {
                return Err(Error::Shape("grid images differ in size".into()));
            }
            image::imageops::replace(&mut out, &img, (col as u32 * tw) as i64, (row as u32 * th) as i64);
        }
    }
    Ok(out)
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &png_bytes(img)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
