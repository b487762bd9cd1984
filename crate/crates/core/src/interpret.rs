//! Saliency maps from trained models: per-Gaussian footprint (det Σ) maps and
//! class-discriminative attention maps (CDAM), projected onto a 16×16 grid.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gaussian::{decode, pixel_to_ndc, DecodedGaussianBatch, RawGaussianBatch, ScaleBound, PARAMS_PER_GAUSSIAN};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Cells per side of every saliency grid.
pub const GRID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Raw,
    /// Rescaled to `[0, 1]`; a constant grid maps to all zeros.
    MinMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `[16, 16]`, row 0 at the top of the image.
    pub grid: Tensor,
    pub normalization: Normalization,
    pub class_id: Option<usize>,
}

impl SaliencyMap {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.grid.data()[row * GRID + col]
    }

    pub fn normalized(&self) -> SaliencyMap {
        let d = self.grid.data();
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let grid = Tensor::from_fn([GRID, GRID], |i| if span > 0.0 { (d[i] - lo) / span } else { 0.0 });
        SaliencyMap {
            grid,
            normalization: Normalization::MinMax,
            class_id: self.class_id,
        }
    }
}

/// Grid cell `(row, col)` holding a normalized-coordinate point. Cells are
/// half-open `[lo, hi)`; the far image edge belongs to the last cell.
pub fn cell_of(center: [f64; 2]) -> (usize, usize) {
    let idx = |v: f64| (((v + 1.0) / 2.0 * GRID as f64).floor().max(0.0) as usize).min(GRID - 1);
    (idx(center[1]), idx(center[0]))
}

fn project(centers: &[[f64; 2]], values: &[f64], mean: bool) -> Tensor {
    let mut sum = vec![0.0; GRID * GRID];
    let mut count = vec![0usize; GRID * GRID];
    for (c, v) in centers.iter().zip(values) {
        let (r, col) = cell_of(*c);
        sum[r * GRID + col] += v;
        count[r * GRID + col] += 1;
    }
    if mean {
        for (s, &n) in sum.iter_mut().zip(&count) {
            if n > 0 {
                *s /= n as f64;
            }
        }
    }
    Tensor::new([GRID, GRID], sum).expect("grid layout")
}

fn centers(batch: &DecodedGaussianBatch) -> Vec<[f64; 2]> {
    (0..batch.len()).map(|i| batch.center(i)).collect()
}

/// `det Σ = s₁²s₂²` for every Gaussian.
pub fn determinants(batch: &DecodedGaussianBatch) -> Vec<f64> {
    (0..batch.len())
        .map(|i| {
            let [s1, s2] = batch.scales(i);
            (s1 * s2).powi(2)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetMap {
    pub dets: Vec<f64>,
    /// Mean of `−ln det Σ` over the Gaussians centered in each cell; empty
    /// cells are 0. Small footprints score high.
    pub map: SaliencyMap,
}

pub fn det_sigma_map(batch: &DecodedGaussianBatch) -> DetMap {
    let dets = determinants(batch);
    let scores: Vec<f64> = dets.iter().map(|d| -d.ln()).collect();
    DetMap {
        map: SaliencyMap {
            grid: project(&centers(batch), &scores, true),
            normalization: Normalization::Raw,
            class_id: None,
        },
        dets,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CdamSource {
    /// Hidden tokens entering the classifier's last transformer block.
    #[default]
    FinalBlockInput,
    /// The raw 9-parameter Gaussians fed to the classifier.
    RawInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cdam {
    /// `S_i = Σ_j g_ij ∂f_c/∂g_ij` per Gaussian.
    pub scores: Vec<f64>,
    /// Scores summed per cell of the Gaussian centers.
    pub map: SaliencyMap,
}

/// Class-discriminative attention map for logit `class_id`, by plain
/// backpropagation.
pub fn cdam(raw: &RawGaussianBatch, classifier: &Classifier, class_id: usize, source: CdamSource) -> Result<Cdam> {
    cdam_with(raw, classifier, class_id, source, false)
}

/// [`cdam`] with the option of holding attention weights constant during the
/// backward pass.
pub fn cdam_with(
    raw: &RawGaussianBatch,
    classifier: &Classifier,
    class_id: usize,
    source: CdamSource,
    detach_attention: bool,
) -> Result<Cdam> {
    let cfg = &classifier.config;
    if class_id >= cfg.num_classes {
        return Err(Error::validation(format!(
            "class {class_id} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let k = raw.len();
    let tape = Tape::new();
    let params = classifier.params.bind(&tape, false);
    let input = tape.leaf(raw.params().clone().reshape([1, k, PARAMS_PER_GAUSSIAN])?, true);
    let out = classifier.forward_with(&params, &input, detach_attention)?;
    let logit = out.logits.narrow(1, class_id, 1)?.sum();
    let (tokens, skip) = match source {
        CdamSource::RawInput => (input, 0),
        CdamSource::FinalBlockInput => (out.final_block_input, usize::from(cfg.use_class_token)),
    };
    let grad = tape.gradients(&logit, &[tokens])?.remove(0);
    let act = tokens.value();
    let width = act.shape()[2];
    let scores: Vec<f64> = (0..k)
        .map(|i| {
            let row = (skip + i) * width;
            (row..row + width).map(|j| act.data()[j] * grad.data()[j]).sum()
        })
        .collect();
    let decoded = decode(raw, ScaleBound::new(cfg.scale_bound)?)?;
    Ok(Cdam {
        map: SaliencyMap {
            grid: project(&centers(&decoded), &scores, false),
            normalization: Normalization::Raw,
            class_id: Some(class_id),
        },
        scores,
    })
}

/// Piecewise-linear dark-purple → orange → pale-yellow ramp.
const COLORMAP_STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [87.0, 16.0, 110.0],
    [188.0, 55.0, 84.0],
    [249.0, 142.0, 9.0],
    [252.0, 255.0, 164.0],
];

/// Color of a value in `[0, 1]` (clamped).
pub fn colormap(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0) * (COLORMAP_STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP_STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (COLORMAP_STOPS[i], COLORMAP_STOPS[i + 1]);
    [0, 1, 2].map(|c| (a[c] + f * (b[c] - a[c])).round() as u8)
}

/// Min-max normalized map through [`colormap`], each cell `upscale` pixels wide.
pub fn heatmap_image(map: &SaliencyMap, upscale: usize) -> RgbImage {
    let norm = map.normalized();
    let side = (GRID * upscale.max(1)) as u32;
    let up = upscale.max(1) as u32;
    RgbImage::from_fn(side, side, |x, y| {
        Rgb(colormap(norm.value((y / up) as usize, (x / up) as usize)))
    })
}

pub fn export_heatmap(map: &SaliencyMap, path: &Path, upscale: usize) -> Result<()> {
    heatmap_image(map, upscale).save(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Codec {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// `index,x,y,det,score` rows for every Gaussian; `score` is empty without
/// CDAM scores.
pub fn gaussian_csv(batch: &DecodedGaussianBatch, scores: Option<&[f64]>) -> String {
    let dets = determinants(batch);
    let mut out = String::from("index,x,y,det,score\n");
    for (i, det) in dets.iter().enumerate() {
        let [x, y] = batch.center(i);
        let score = scores.and_then(|s| s.get(i)).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{i},{x},{y},{det},{score}");
    }
    out
}

/// Cells in which at least half of the pixels are foreground. `mask` is
/// row-major `size × size`.
pub fn foreground_cells(mask: &[bool], size: usize) -> Result<Vec<bool>> {
    if mask.len() != size * size {
        return Err(Error::validation(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            size * size
        )));
    }
    let mut fg = vec![0usize; GRID * GRID];
    let mut all = vec![0usize; GRID * GRID];
    for r in 0..size {
        for c in 0..size {
            let (cr, cc) = cell_of([pixel_to_ndc(c, size), pixel_to_ndc(r, size)]);
            all[cr * GRID + cc] += 1;
            fg[cr * GRID + cc] += usize::from(mask[r * size + c]);
        }
    }
    Ok(fg.iter().zip(&all).map(|(&f, &a)| a > 0 && 2 * f >= a).collect())
}

/// Sums and counts of det Σ split by whether each Gaussian's center cell is
/// foreground.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegionDets {
    pub fg_sum: f64,
    pub fg_count: usize,
    pub bg_sum: f64,
    pub bg_count: usize,
}

impl RegionDets {
    pub fn add(&mut self, batch: &DecodedGaussianBatch, fg_cells: &[bool]) {
        for (i, det) in determinants(batch).into_iter().enumerate() {
            let (r, c) = cell_of(batch.center(i));
            if fg_cells[r * GRID + c] {
                self.fg_sum += det;
                self.fg_count += 1;
            } else {
                self.bg_sum += det;
                self.bg_count += 1;
            }
        }
    }

    pub fn fg_mean(&self) -> f64 {
        self.fg_sum / self.fg_count as f64
    }

    pub fn bg_mean(&self) -> f64 {
        self.bg_sum / self.bg_count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(x: f64, y: f64, s: f64) -> [f64; PARAMS_PER_GAUSSIAN] {
        [x, y, s, s, 0.0, 0.5, 0.5, 0.5, 0.5]
    }

    #[test]
    fn isotropic_det() {
        let b = DecodedGaussianBatch::from_rows(&[row(0.0, 0.0, 0.5)]);
        assert_eq!(det_sigma_map(&b).dets, vec![0.0625]);
    }

    #[test]
    fn smaller_footprint_scores_higher() {
        let b = DecodedGaussianBatch::from_rows(&[row(-0.9, -0.9, 0.05), row(0.9, 0.9, 0.6)]);
        let m = det_sigma_map(&b).map;
        let (a, c) = (cell_of([-0.9, -0.9]), cell_of([0.9, 0.9]));
        assert!(m.value(a.0, a.1) > m.value(c.0, c.1));
        assert_eq!(m.value(8, 3), 0.0);
    }

    #[test]
    fn binning_is_half_open() {
        assert_eq!(cell_of([-1.0, -1.0]), (0, 0));
        assert_eq!(cell_of([1.0, 1.0]), (15, 15));
        assert_eq!(cell_of([0.0, -0.875]), (1, 8));
        assert_eq!(cell_of([-1e-12, 0.0]), (8, 7));
    }

    #[test]
    fn constant_grid_normalizes_to_zero() {
        let m = SaliencyMap {
            grid: Tensor::full([GRID, GRID], 3.0),
            normalization: Normalization::Raw,
            class_id: None,
        };
        assert!(m.normalized().grid.data().iter().all(|&v| v == 0.0));
        let img = heatmap_image(&m, 8);
        assert_eq!(img.dimensions(), (128, 128));
        assert!(img.pixels().all(|p| p.0 == colormap(0.0)));
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 4]);
        assert_eq!(colormap(1.0), [252, 255, 164]);
        assert_eq!(colormap(0.25), [87, 16, 110]);
    }
}
