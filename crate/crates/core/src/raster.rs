//! Differentiable splatting of decoded Gaussians into an RGB image.
//!
//! Gaussians are composited front to back in sequence order under an
//! orthographic view. Work is split into 16×16 pixel tiles; per-tile results
//! are reduced in tile order so the output does not depend on thread count.

use rayon::prelude::*;

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::gaussian::{covariance_checked, pixel_to_ndc, DecodedGaussianBatch, PARAMS_PER_GAUSSIAN};
use crate::tensor::Tensor;

pub const TILE_SIZE: usize = 16;
pub const DEFAULT_ALPHA_CLAMP: f64 = 0.999;

/// Half the Mahalanobis form above which a weight is taken as exactly zero.
pub const MAX_EXPONENT: f64 = 40.0;

/// Culling radius in standard deviations. The weight at the boundary is e^-20.
pub const CULL_RADIUS: f64 = 6.324_555_320_336_759;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenderMode {
    /// Every Gaussian is evaluated at every pixel.
    Exact,
    /// Gaussians are only evaluated in tiles their bounding box touches.
    #[default]
    Tiled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub alpha_clamp: f64,
    pub mode: RenderMode,
}

impl RenderTarget {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        RenderTarget {
            width,
            height,
            background: [0.0; 3],
            alpha_clamp: DEFAULT_ALPHA_CLAMP,
            mode: RenderMode::Tiled,
        }
        .validated()
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Result<Self> {
        self.background = background;
        self.validated()
    }

    pub fn with_alpha_clamp(mut self, alpha_clamp: f64) -> Result<Self> {
        self.alpha_clamp = alpha_clamp;
        self.validated()
    }

    pub fn with_mode(mut self, mode: RenderMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validated(self) -> Result<Self> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(format!(
                "render target must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.background.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::validation("background components must lie in [0, 1]"));
        }
        if !(self.alpha_clamp > 0.0 && self.alpha_clamp <= 1.0) {
            return Err(Error::validation(format!(
                "alpha clamp must lie in (0, 1], got {}",
                self.alpha_clamp
            )));
        }
        Ok(self)
    }

    fn tiles_x(&self) -> usize {
        self.width.div_ceil(TILE_SIZE)
    }

    fn tiles_y(&self) -> usize {
        self.height.div_ceil(TILE_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// `[H, W, 3]`.
    pub image: Tensor,
    /// Sum over pixels of the composited alpha `α_i T_i` of each Gaussian.
    pub coverage: Vec<f64>,
}

/// Per-tile Gaussian index lists in row-major tile order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<usize>>,
}

impl TileBins {
    pub fn tile(&self, tx: usize, ty: usize) -> &[usize] {
        &self.lists[ty * self.tiles_x + tx]
    }
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    px: f64,
    py: f64,
    s1: f64,
    s2: f64,
    cos: f64,
    sin: f64,
    // Conic (inverse covariance) entries.
    a: f64,
    b: f64,
    c: f64,
    // Bounding box half-extents in normalized units.
    rx: f64,
    ry: f64,
    color: [f64; 3],
    opacity: f64,
}

fn prepare(batch: &DecodedGaussianBatch) -> Result<Vec<Splat>> {
    (0..batch.len())
        .map(|i| {
            let r = batch.row(i);
            let cov = covariance_checked(i, [r[2], r[3]], r[4])?;
            Ok(Splat {
                px: r[0],
                py: r[1],
                s1: r[2],
                s2: r[3],
                cos: r[4].cos(),
                sin: r[4].sin(),
                a: cov.inverse[0][0],
                b: cov.inverse[0][1],
                c: cov.inverse[1][1],
                rx: CULL_RADIUS * cov.sigma[0][0].sqrt(),
                ry: CULL_RADIUS * cov.sigma[1][1].sqrt(),
                color: [r[5], r[6], r[7]],
                opacity: r[8],
            })
        })
        .collect()
}

/// Inclusive range of pixel indices on an axis of `n` pixels whose normalized
/// coordinate lies in `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if n == 1 {
        return (lo <= 0.0 && 0.0 <= hi).then_some((0, 0));
    }
    let to_pixel = |x: f64| (x + 1.0) * 0.5 * (n - 1) as f64;
    let first = to_pixel(lo).ceil().max(0.0);
    let last = to_pixel(hi).floor().min((n - 1) as f64);
    (first <= last).then_some((first as usize, last as usize))
}

fn bin(splats: &[Splat], target: &RenderTarget) -> TileBins {
    let (tiles_x, tiles_y) = (target.tiles_x(), target.tiles_y());
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        let cols = pixel_span(s.px - s.rx, s.px + s.rx, target.width);
        let rows = pixel_span(s.py - s.ry, s.py + s.ry, target.height);
        let (Some((c0, c1)), Some((r0, r1))) = (cols, rows) else {
            continue;
        };
        for ty in r0 / TILE_SIZE..=r1 / TILE_SIZE {
            for tx in c0 / TILE_SIZE..=c1 / TILE_SIZE {
                lists[ty * tiles_x + tx].push(i);
            }
        }
    }
    TileBins { tiles_x, tiles_y, lists }
}

/// Assigns each Gaussian to the tiles its culling bounding box intersects.
pub fn cull_and_tile(batch: &DecodedGaussianBatch, target: &RenderTarget) -> Result<TileBins> {
    Ok(bin(&prepare(batch)?, target))
}

fn schedule(splats: &[Splat], target: &RenderTarget) -> TileBins {
    match target.mode {
        RenderMode::Tiled => bin(splats, target),
        RenderMode::Exact => {
            let (tiles_x, tiles_y) = (target.tiles_x(), target.tiles_y());
            let all: Vec<usize> = (0..splats.len()).collect();
            TileBins {
                tiles_x,
                tiles_y,
                lists: vec![all; tiles_x * tiles_y],
            }
        }
    }
}

fn tile_pixels(target: &RenderTarget, t: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (t % target.tiles_x(), t / target.tiles_x());
    let rows = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(target.height);
    let cols = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(target.width);
    rows.flat_map(move |r| cols.clone().map(move |c| (r, c)))
}

/// Weight exponent `½ dᵀ Σ⁻¹ d` and offsets for a pixel.
#[inline]
fn exponent(s: &Splat, x: f64, y: f64) -> (f64, f64, f64) {
    let dx = x - s.px;
    let dy = y - s.py;
    (0.5 * (s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy), dx, dy)
}

struct TileForward {
    pixels: Vec<(usize, [f64; 3])>,
    coverage: Vec<(usize, f64)>,
}

fn forward_tile(splats: &[Splat], list: &[usize], target: &RenderTarget, t: usize) -> TileForward {
    let mut pixels = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
    let mut cover = vec![0.0; list.len()];
    for (row, col) in tile_pixels(target, t) {
        let x = pixel_to_ndc(col, target.width);
        let y = pixel_to_ndc(row, target.height);
        let mut trans = 1.0;
        let mut out = [0.0; 3];
        for (slot, &i) in list.iter().enumerate() {
            let s = &splats[i];
            let (e, _, _) = exponent(s, x, y);
            if e > MAX_EXPONENT {
                continue;
            }
            let alpha = (s.opacity * (-e).exp()).min(target.alpha_clamp);
            let contrib = alpha * trans;
            for ch in 0..3 {
                out[ch] += contrib * s.color[ch];
            }
            cover[slot] += contrib;
            trans *= 1.0 - alpha;
        }
        for ch in 0..3 {
            out[ch] += trans * target.background[ch];
        }
        pixels.push((row * target.width + col, out));
    }
    TileForward {
        pixels,
        coverage: list.iter().copied().zip(cover).collect(),
    }
}

fn render_splats(splats: &[Splat], target: &RenderTarget) -> RenderOutput {
    let bins = schedule(splats, target);
    let tiles: Vec<TileForward> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| forward_tile(splats, &bins.lists[t], target, t))
        .collect();
    let mut image = vec![0.0; target.width * target.height * 3];
    let mut coverage = vec![0.0; splats.len()];
    for tile in tiles {
        for (p, rgb) in tile.pixels {
            image[3 * p..3 * p + 3].copy_from_slice(&rgb);
        }
        for (i, c) in tile.coverage {
            coverage[i] += c;
        }
    }
    RenderOutput {
        image: Tensor::new([target.height, target.width, 3], image).expect("image layout"),
        coverage,
    }
}

/// Renders a decoded batch. An empty batch gives the background image.
pub fn render(batch: &DecodedGaussianBatch, target: &RenderTarget) -> Result<RenderOutput> {
    let target = target.validated()?;
    let splats = prepare(batch)?;
    Ok(render_splats(&splats, &target))
}

// Gradient slots accumulated per Gaussian inside a tile.
const G_PX: usize = 0;
const G_PY: usize = 1;
const G_A: usize = 2;
const G_B: usize = 3;
const G_C: usize = 4;
const G_RGB: usize = 5;
const G_O: usize = 8;

struct Hit {
    slot: usize,
    alpha: f64,
    trans: f64,
    weight: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

fn backward_tile(
    splats: &[Splat],
    list: &[usize],
    target: &RenderTarget,
    t: usize,
    upstream: &[f64],
) -> Vec<[f64; 9]> {
    let mut grads = vec![[0.0; 9]; list.len()];
    let mut hits: Vec<Hit> = Vec::with_capacity(list.len());
    for (row, col) in tile_pixels(target, t) {
        let p = row * target.width + col;
        let up = [upstream[3 * p], upstream[3 * p + 1], upstream[3 * p + 2]];
        if up == [0.0; 3] {
            continue;
        }
        let x = pixel_to_ndc(col, target.width);
        let y = pixel_to_ndc(row, target.height);
        hits.clear();
        let mut trans = 1.0;
        for (slot, &i) in list.iter().enumerate() {
            let s = &splats[i];
            let (e, dx, dy) = exponent(s, x, y);
            if e > MAX_EXPONENT {
                continue;
            }
            let weight = (-e).exp();
            let raw = s.opacity * weight;
            let clamped = raw >= target.alpha_clamp;
            let alpha = if clamped { target.alpha_clamp } else { raw };
            hits.push(Hit {
                slot,
                alpha,
                trans,
                weight,
                clamped,
                dx,
                dy,
            });
            trans *= 1.0 - alpha;
        }
        // Color composited behind the current Gaussian, including background.
        let mut behind = [0.0; 3];
        for ch in 0..3 {
            behind[ch] = trans * target.background[ch];
        }
        for h in hits.iter().rev() {
            let s = &splats[list[h.slot]];
            let g = &mut grads[h.slot];
            let contrib = h.alpha * h.trans;
            let mut g_alpha = 0.0;
            for ch in 0..3 {
                g[G_RGB + ch] += up[ch] * contrib;
                g_alpha += up[ch] * (h.trans * s.color[ch] - behind[ch] / (1.0 - h.alpha));
                behind[ch] += contrib * s.color[ch];
            }
            if h.clamped {
                continue;
            }
            g[G_O] += g_alpha * h.weight;
            // d weight / d exponent = -weight
            let g_e = -g_alpha * s.opacity * h.weight;
            g[G_A] += g_e * 0.5 * h.dx * h.dx;
            g[G_B] += g_e * h.dx * h.dy;
            g[G_C] += g_e * 0.5 * h.dy * h.dy;
            g[G_PX] -= g_e * (s.a * h.dx + s.b * h.dy);
            g[G_PY] -= g_e * (s.b * h.dx + s.c * h.dy);
        }
    }
    grads
}

/// Chain rule from conic entries to (s₁, s₂, φ).
fn conic_to_params(s: &Splat, g: &[f64; 9]) -> [f64; 3] {
    let (cs, c2, s2) = (s.cos * s.sin, s.cos * s.cos, s.sin * s.sin);
    let (u1, u2) = (1.0 / (s.s1 * s.s1), 1.0 / (s.s2 * s.s2));
    let d1 = -2.0 / (s.s1 * s.s1 * s.s1);
    let d2 = -2.0 / (s.s2 * s.s2 * s.s2);
    let (ga, gb, gc) = (g[G_A], g[G_B], g[G_C]);
    let g_s1 = d1 * (ga * c2 + gb * cs + gc * s2);
    let g_s2 = d2 * (ga * s2 - gb * cs + gc * c2);
    let g_phi = ga * 2.0 * cs * (u2 - u1) + gb * (c2 - s2) * (u1 - u2) + gc * 2.0 * cs * (u1 - u2);
    [g_s1, g_s2, g_phi]
}

fn backward_splats(splats: &[Splat], target: &RenderTarget, upstream: &[f64]) -> Vec<f64> {
    let bins = schedule(splats, target);
    let tiles: Vec<Vec<[f64; 9]>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| backward_tile(splats, &bins.lists[t], target, t, upstream))
        .collect();
    let mut acc = vec![[0.0; 9]; splats.len()];
    for (t, partial) in tiles.iter().enumerate() {
        for (slot, g) in partial.iter().enumerate() {
            let dst = &mut acc[bins.lists[t][slot]];
            for j in 0..9 {
                dst[j] += g[j];
            }
        }
    }
    let mut out = Vec::with_capacity(splats.len() * PARAMS_PER_GAUSSIAN);
    for (s, g) in splats.iter().zip(&acc) {
        let [g_s1, g_s2, g_phi] = conic_to_params(s, g);
        out.extend_from_slice(&[g[G_PX], g[G_PY], g_s1, g_s2, g_phi, g[5], g[6], g[7], g[G_O]]);
    }
    out
}

/// Gradient of `Σ upstream ⊙ render(batch)` with respect to every decoded
/// parameter, laid out `[k, 9]` like the batch.
pub fn render_backward(batch: &DecodedGaussianBatch, target: &RenderTarget, upstream: &Tensor) -> Result<Tensor> {
    let target = target.validated()?;
    let expected = [target.height, target.width, 3];
    if upstream.shape() != expected {
        return Err(Error::Contract(format!(
            "render_backward: upstream shape {:?} does not match target {:?}",
            upstream.shape(),
            expected
        )));
    }
    let splats = prepare(batch)?;
    Tensor::new([batch.len(), PARAMS_PER_GAUSSIAN], backward_splats(&splats, &target, upstream.data()))
}

struct RenderOp {
    target: RenderTarget,
}

impl RenderOp {
    fn scenes(&self, input: &Tensor) -> Result<(usize, usize, bool)> {
        match *input.shape() {
            [k, PARAMS_PER_GAUSSIAN] => Ok((1, k, false)),
            [b, k, PARAMS_PER_GAUSSIAN] => Ok((b, k, true)),
            _ => Err(Error::shape("render", input.shape(), &[0, PARAMS_PER_GAUSSIAN])),
        }
    }

    fn splats(&self, input: &Tensor, scene: usize, k: usize) -> Result<Vec<Splat>> {
        let rows = &input.data()[scene * k * PARAMS_PER_GAUSSIAN..(scene + 1) * k * PARAMS_PER_GAUSSIAN];
        let batch = DecodedGaussianBatch::new(Tensor::new([k, PARAMS_PER_GAUSSIAN], rows.to_vec())?)?;
        prepare(&batch)
    }
}

impl CustomOp for RenderOp {
    fn name(&self) -> &str {
        "render"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (b, k, batched) = self.scenes(inputs[0])?;
        let t = &self.target;
        let mut data = Vec::with_capacity(b * t.height * t.width * 3);
        for scene in 0..b {
            let splats = self.splats(inputs[0], scene, k)?;
            data.extend(render_splats(&splats, t).image.into_data());
        }
        let shape = if batched {
            vec![b, t.height, t.width, 3]
        } else {
            vec![t.height, t.width, 3]
        };
        Tensor::new(shape, data)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (b, k, _) = self.scenes(inputs[0])?;
        let t = &self.target;
        let pixels = t.height * t.width * 3;
        let mut data = Vec::with_capacity(inputs[0].numel());
        for scene in 0..b {
            let splats = self.splats(inputs[0], scene, k)?;
            let up = &grad_output.data()[scene * pixels..(scene + 1) * pixels];
            data.extend(backward_splats(&splats, t, up));
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

/// Differentiable render of decoded rows `[k, 9]` (one image `[H, W, 3]`) or
/// `[B, k, 9]` (images `[B, H, W, 3]`).
pub fn render_var<'t>(decoded: &Var<'t>, target: &RenderTarget) -> Result<Var<'t>> {
    let target = target.validated()?;
    decoded.tape().custom(&[*decoded], Box::new(RenderOp { target }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(px: f64, py: f64, s: f64, color: [f64; 3], o: f64) -> [f64; 9] {
        [px, py, s, s, 0.0, color[0], color[1], color[2], o]
    }

    #[test]
    fn empty_scene_is_background() {
        let target = RenderTarget::new(5, 3).unwrap().with_background([0.2, 0.4, 0.6]).unwrap();
        let out = render(&DecodedGaussianBatch::from_rows(&[]), &target).unwrap();
        assert!(out.image.data().chunks(3).all(|p| p == [0.2, 0.4, 0.6]));
        let black = RenderTarget::new(4, 4).unwrap();
        let out = render(&DecodedGaussianBatch::from_rows(&[]), &black).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_overlapping_half_alphas() {
        // Huge scales make w ≈ 1 everywhere on a 1×1 target.
        let rows = [row(0.0, 0.0, 1e4, [1.0, 0.0, 0.0], 0.5), row(0.0, 0.0, 1e4, [0.0, 0.0, 1.0], 0.5)];
        let target = RenderTarget::new(1, 1).unwrap().with_background([0.0, 1.0, 0.0]).unwrap();
        let out = render(&DecodedGaussianBatch::from_rows(&rows), &target).unwrap();
        let px = out.image.data();
        assert!((px[0] - 0.5).abs() < 1e-12 && (px[1] - 0.25).abs() < 1e-12 && (px[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn falloff_at_mahalanobis_two() {
        // 9 pixels across [-1, 1]: spacing 0.25. Scale 0.25 puts the next-but-one pixel at distance 2.
        let target = RenderTarget::new(9, 9).unwrap();
        let o = crate::gaussian::sigmoid(50.0);
        let rows = [row(0.0, 0.0, 0.25, [1.0, 1.0, 1.0], o)];
        let out = render(&DecodedGaussianBatch::from_rows(&rows), &target).unwrap();
        let at = |r: usize, c: usize| out.image.data()[3 * (r * 9 + c)];
        assert!((at(4, 4) - 0.999).abs() < 1e-12);
        assert!((at(4, 6) - o * (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let rows = [row(0.1, -0.2, 0.3, [0.2, 0.5, 0.9], 0.7)];
        let target = RenderTarget::new(8, 8).unwrap();
        let g = render_backward(&DecodedGaussianBatch::from_rows(&rows), &target, &Tensor::zeros([8, 8, 3])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upstream_shape_checked() {
        let target = RenderTarget::new(8, 8).unwrap();
        let err = render_backward(&DecodedGaussianBatch::from_rows(&[]), &target, &Tensor::zeros([8, 7, 3]));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn pixel_span_inclusive() {
        assert_eq!(pixel_span(-1.0, 1.0, 5), Some((0, 4)));
        assert_eq!(pixel_span(-0.1, 0.1, 5), Some((2, 2)));
        assert_eq!(pixel_span(0.05, 0.4, 5), None);
        assert_eq!(pixel_span(-3.0, -2.0, 5), None);
        assert_eq!(pixel_span(-0.5, 0.5, 1), Some((0, 0)));
    }
}
