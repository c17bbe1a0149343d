use std::path::Path;

use super::RgbImage;
use crate::error::Result;

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    RgbImage::new(w as usize, h as usize, data)
}

/// 8-bit export; values are clamped then rounded to the nearest level.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("RgbImage length is validated on construction");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
