use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::Image;
use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Decodes any supported format into a 3-channel image with values in `[-1, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::filled(h, w, 3, 0.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, px[c] as f32 / 127.5 - 1.0);
        }
    }
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes a 1- or 3-channel `[-1, 1]` image as PNG (lossless 8-bit).
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = match img.channels() {
        1 => GrayImage::from_fn(w, h, |x, y| Luma([to_u8(img.get(0, y as usize, x as usize))]))
            .save_with_format(path, image::ImageFormat::Png),
        3 => RgbImage::from_fn(w, h, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))])
        })
        .save_with_format(path, image::ImageFormat::Png),
        c => {
            return Err(Error::contract(format!("cannot save a {c}-channel image")));
        }
    };
    res.map_err(|e| image_err(path, e))
}

/// Per-pixel class indices stored as an 8-bit grayscale PNG.
pub fn save_label_map(path: &Path, height: usize, width: usize, classes: &[u8]) -> Result<()> {
    assert_eq!(classes.len(), height * width);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, classes.to_vec()).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Returns `(height, width, classes)`.
pub fn load_label_map(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let g = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    Ok((g.height() as usize, g.width() as usize, g.into_raw()))
}
