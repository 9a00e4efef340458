//! PNG import and export.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `H × W × 3` image in `[0, 1]` as 8-bit RGB.
pub fn save_rgb_png(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        Rgb([quantize8(image[[r, c, 0]]), quantize8(image[[r, c, 1]]), quantize8(image[[r, c, 2]])])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes `values` as 16-bit grayscale after mapping `[lo, hi]` to the full range.
pub fn save_gray16_png(path: &Path, values: &Array2<f32>, lo: f32, hi: f32) -> Result<()> {
    let (h, w) = values.dim();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = ((values[[y as usize, x as usize]] - lo) / span).clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path)?;
    Ok(())
}

/// Reads any 8- or 16-bit PNG as RGB in `[0, 1]`. Failures name the file.
pub fn load_rgb_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .map_err(|e| Error::Shape(format!("{}: {e}", path.display())))
}
