//! PNG patches: square, 8-bit RGB.

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};
use mitoshift_core::stain::RgbPatch;

use crate::error::{Error, Result};

/// Reads a square 8-bit RGB PNG, optionally requiring a side length.
pub fn read_patch(path: &Path, side: Option<usize>) -> Result<RgbPatch> {
    let img = image::open(path).map_err(|e| Error::data(path, format!("cannot decode image: {e}")))?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::data(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w != h {
        return Err(Error::data(path, format!("image is {w}x{h}, expected a square patch")));
    }
    if let Some(s) = side {
        if w != s {
            return Err(Error::data(path, format!("image side is {w}, configured side is {s}")));
        }
    }
    Ok(RgbPatch::new(w, h, rgb.into_raw())?)
}

pub fn write_patch(path: &Path, patch: &RgbPatch) -> Result<()> {
    let side = patch.side() as u32;
    let img = RgbImage::from_raw(side, side, patch.pixels().to_vec()).expect("patch buffer matches its side");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::data(path, format!("cannot write image: {e}")))
}
