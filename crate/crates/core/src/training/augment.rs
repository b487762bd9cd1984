use rand::Rng;

use crate::tensor::Tensor;

/// Smallest crop area as a fraction of the image.
pub const MIN_CROP_AREA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub hflip: bool,
    pub crop: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.crop
    }
}

/// Mirrors an `[H, W, C]` image left to right.
pub fn hflip(img: &Tensor) -> Tensor {
    let [h, w, c] = img.shape()[..] else { panic!("hflip expects [H, W, C]") };
    Tensor::from_fn([h, w, c], |i| {
        let (r, rest) = (i / (w * c), i % (w * c));
        let (col, ch) = (rest / c, rest % c);
        img.data()[(r * w + (w - 1 - col)) * c + ch]
    })
}

/// Bilinear resample of the square window `[x0, x0 + side) × [y0, y0 + side)`
/// (pixel units) back to the full image size.
pub fn crop_resize(img: &Tensor, x0: f64, y0: f64, side: f64) -> Tensor {
    let [h, w, c] = img.shape()[..] else { panic!("crop_resize expects [H, W, C]") };
    let sample = |x: f64, y: f64, ch: usize| {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        let (xj, yj) = ((xi + 1).min(w - 1), (yi + 1).min(h - 1));
        let (fx, fy) = (x - xi as f64, y - yi as f64);
        let at = |r: usize, col: usize| img.data()[(r * w + col) * c + ch];
        (1.0 - fy) * ((1.0 - fx) * at(yi, xi) + fx * at(yi, xj)) + fy * ((1.0 - fx) * at(yj, xi) + fx * at(yj, xj))
    };
    Tensor::from_fn([h, w, c], |i| {
        let (r, rest) = (i / (w * c), i % (w * c));
        let (col, ch) = (rest / c, rest % c);
        let x = x0 + (col as f64 + 0.5) * side / w as f64 - 0.5;
        let y = y0 + (r as f64 + 0.5) * side / h as f64 - 0.5;
        sample(x, y, ch)
    })
}

/// Random horizontal flip (p = 0.5) and random square crop covering
/// `[0.5, 1]` of the image area, resized back.
pub fn augment_image<R: Rng + ?Sized>(img: &Tensor, aug: Augment, rng: &mut R) -> Tensor {
    let mut out = img.clone();
    if aug.crop {
        let size = img.shape()[1] as f64;
        let side = rng.gen_range(MIN_CROP_AREA..=1.0f64).sqrt() * size;
        let x0 = rng.gen_range(0.0..=size - side);
        let y0 = rng.gen_range(0.0..=size - side);
        out = crop_resize(&out, x0, y0, side);
    }
    if aug.hflip && rng.gen_bool(0.5) {
        out = hflip(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let img = Tensor::from_fn([3, 4, 3], |i| i as f64);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).data()[0], img.data()[9]);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = Tensor::from_fn([5, 5, 3], |i| (i as f64 * 0.1).sin());
        assert!(crop_resize(&img, 0.0, 0.0, 5.0).max_abs_diff(&img) < 1e-15);
    }
}
