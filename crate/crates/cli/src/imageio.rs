use std::path::Path;

use gvit_core::gaussian::{covariance_of, DecodedGaussianBatch};
use gvit_core::Tensor;
use image::imageops::{self, FilterType};
use image::{ImageError, Rgb, RgbImage};

use crate::error::{CliError, Result};

fn image_error(path: &Path, e: ImageError) -> CliError {
    match e {
        ImageError::IoError(source) => CliError::io(path, source),
        other => CliError::format(path, other.to_string()),
    }
}

/// `[H, W, 3]` floats in `[0, 1]` from an 8-bit RGB image.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new([h as usize, w as usize, 3], data).expect("rgb layout")
}

/// Clamps to `[0, 1]` and rounds to 8 bits.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let [h, w, 3] = t.shape()[..] else { panic!("expected [H, W, 3], got {:?}", t.shape()) };
    let raw = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb layout")
}

/// Square resize with a triangle filter; a no-op at the target size.
pub fn resize_square(img: RgbImage, size: usize) -> RgbImage {
    let s = size as u32;
    if img.dimensions() == (s, s) {
        img
    } else {
        imageops::resize(&img, s, s, FilterType::Triangle)
    }
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&resize_square(img, size)))
}

/// Writes PNG or PPM depending on the extension.
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_error(path, e))
}

pub fn upscale(img: &RgbImage, factor: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let f = factor.max(1) as u32;
    imageops::resize(img, w * f, h * f, FilterType::Nearest)
}

pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    let (lw, lh) = left.dimensions();
    let (rw, rh) = right.dimensions();
    let mut out = RgbImage::new(lw + rw, lh.max(rh));
    imageops::replace(&mut out, left, 0, 0);
    imageops::replace(&mut out, right, lw as i64, 0);
    out
}

/// Outlines the 2σ ellipse of every Gaussian in its own color; returns the
/// number of ellipses drawn.
pub fn draw_ellipses(img: &mut RgbImage, batch: &DecodedGaussianBatch) -> gvit_core::Result<usize> {
    let (w, h) = img.dimensions();
    let to_px = |v: f64, n: u32| (v + 1.0) * (n.max(2) - 1) as f64 / 2.0;
    let mut drawn = 0;
    for i in 0..batch.len() {
        covariance_of(batch, i)?;
        let [cx, cy] = batch.center(i);
        let [s1, s2] = batch.scales(i);
        let (c, s) = (batch.rotation(i).cos(), batch.rotation(i).sin());
        let color = Rgb(batch.color(i).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        // Enough samples that consecutive points are about a pixel apart.
        let radius_px = 2.0 * s1.max(s2) * w.max(h) as f64 / 2.0;
        let samples = ((radius_px * 2.0 * std::f64::consts::PI).ceil() as usize).clamp(16, 4096);
        for j in 0..samples {
            let t = j as f64 / samples as f64 * std::f64::consts::TAU;
            let (u, v) = (2.0 * s1 * t.cos(), 2.0 * s2 * t.sin());
            let x = to_px(cx + c * u - s * v, w).round();
            let y = to_px(cy + s * u + c * v, h).round();
            if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
        drawn += 1;
    }
    Ok(drawn)
}
