//! PNG images as `3 x H x W` tensors in `[0, 1]`, and grayscale masks.

use std::path::Path;

use image::{GrayImage, ImageError, RgbImage};

use crate::error::{Error, Result};
use crate::localized::IndexedMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))
}

/// Loads any supported image as RGB, scaled to `[0, 1]`.
pub fn load_rgb<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = S::one() / S::lit(255.0);
    Ok(Tensor::from_fn(3, h, w, |c, y, x| {
        S::lit(img.get_pixel(x as u32, y as u32)[c] as f64) * scale
    }))
}

/// Rounds `[0, 1]` values to 8 bits, clipping out-of-range values.
pub fn quantize<S: Scalar>(v: S) -> u8 {
    let x = v.as_f64();
    if x.is_nan() {
        return 0;
    }
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8<S: Scalar>(t: &Tensor<S>) -> Result<RgbImage> {
    if t.channels() != 3 {
        return Err(Error::shape(format!(
            "RGB output needs 3 channels, tensor has {}",
            t.channels()
        )));
    }
    let (h, w) = (t.height(), t.width());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            quantize(t.get(0, y, x)),
            quantize(t.get(1, y, x)),
            quantize(t.get(2, y, x)),
        ])
    }))
}

/// Writes an 8-bit RGB PNG.
pub fn save_rgb<S: Scalar>(t: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    to_rgb8(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Loads a grayscale mask; distinct gray levels become region ids in
/// ascending order.
pub fn load_mask(path: impl AsRef<Path>) -> Result<IndexedMask> {
    let path = path.as_ref();
    let img = open(path)?.to_luma8();
    IndexedMask::from_gray_levels(img.height() as usize, img.width() as usize, img.as_raw())
}

/// Writes a mask with region `r` drawn at gray level `levels[r]`.
pub fn save_mask(mask: &IndexedMask, levels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if levels.len() < mask.region_count() {
        return Err(Error::config("fewer gray levels than mask regions"));
    }
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([levels[mask.id(y as usize, x as usize) as usize]])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}
