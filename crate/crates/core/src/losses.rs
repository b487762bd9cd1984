//! Reconstruction and classification objectives.
//!
//! Image losses take the rendered image as a tape variable and the reference as
//! a plain tensor; gradients flow to the rendered side only. Images are
//! `[H, W, C]` or batched `[B, H, W, C]`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Largest guidance coefficient accepted anywhere.
pub const MAX_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_perc: f64,
    pub lambda_cls: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(lambda_perc: f64, lambda_cls: f64, gamma: f64) -> Result<Self> {
        LossWeights {
            lambda_perc,
            lambda_cls,
            gamma,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        for (name, v) in [("lambda_perc", self.lambda_perc), ("lambda_cls", self.lambda_cls)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..=MAX_GAMMA).contains(&self.gamma) {
            return Err(Error::validation(format!(
                "gamma must lie in [0, {MAX_GAMMA}], got {}",
                self.gamma
            )));
        }
        Ok(self)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_perc: 0.1,
            lambda_cls: 1.0,
            gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconstructionVariant {
    Mse,
    Bce,
    MseDssim,
    #[default]
    BceDssim,
}

impl ReconstructionVariant {
    pub fn uses_dssim(self) -> bool {
        matches!(self, Self::MseDssim | Self::BceDssim)
    }
}

impl fmt::Display for ReconstructionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mse => "mse",
            Self::Bce => "bce",
            Self::MseDssim => "mse+dssim",
            Self::BceDssim => "bce+dssim",
        })
    }
}

impl FromStr for ReconstructionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "bce" => Ok(Self::Bce),
            "mse+dssim" => Ok(Self::MseDssim),
            "bce+dssim" => Ok(Self::BceDssim),
            other => Err(Error::validation(format!(
                "unknown loss variant {other:?}; expected mse, bce, mse+dssim or bce+dssim"
            ))),
        }
    }
}

fn same_shape(op: &'static str, x: &Var<'_>, reference: &Tensor) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(Error::shape(op, &x.shape(), reference.shape()));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse<'t>(rendered: &Var<'t>, reference: &Tensor) -> Result<Var<'t>> {
    same_shape("mse", rendered, reference)?;
    let y = rendered.tape().constant(reference.clone());
    Ok(rendered.sub(&y)?.square().mean())
}

struct BceOp {
    reference: Tensor,
}

impl CustomOp for BceOp {
    fn name(&self) -> &str {
        "bce"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let n = self.reference.numel() as f64;
        let total: f64 = inputs[0]
            .data()
            .iter()
            .zip(self.reference.data())
            .map(|(&x, &y)| {
                let x = x.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * x.ln() + (1.0 - y) * (1.0 - x).ln())
            })
            .sum();
        Ok(Tensor::scalar(total / n))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let scale = grad_output.item() / self.reference.numel() as f64;
        let x = inputs[0];
        let y = self.reference.data();
        let g = Tensor::from_fn(x.shape().to_vec(), |i| {
            let xi = x.data()[i];
            if xi < BCE_EPS || xi > 1.0 - BCE_EPS {
                0.0
            } else {
                scale * ((1.0 - y[i]) / (1.0 - xi) - y[i] / xi)
            }
        });
        Ok(vec![Some(g)])
    }
}

/// Per-element Bernoulli cross-entropy against real-valued targets, with the
/// rendered side clamped to `[ε, 1 − ε]`.
pub fn bce<'t>(rendered: &Var<'t>, reference: &Tensor) -> Result<Var<'t>> {
    same_shape("bce", rendered, reference)?;
    if let Some(v) = reference.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!("bce reference value {v} outside [0, 1]")));
    }
    rendered.tape().custom(
        &[*rendered],
        Box::new(BceOp {
            reference: reference.clone(),
        }),
    )
}

/// Softmax cross-entropy averaged over the batch.
pub fn cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels)
}

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.map(|v| v / total)
}

/// Image geometry of an SSIM input: (planes, height, width, channels).
fn ssim_geometry(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (b, h, w, c) = match *shape {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(Error::shape("dssim", shape, &[0, 0, 0])),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "dssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    Ok((b, h, w, c))
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_adjoint(grad: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..oh {
        for c in 0..ow {
            let v = grad[r * ow + c];
            for k in 0..SSIM_WINDOW {
                tmp[(r + k) * ow + c] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..ow {
            let v = tmp[r * ow + c];
            for k in 0..SSIM_WINDOW {
                out[r * w + c + k] += g[k] * v;
            }
        }
    }
    out
}

/// Filtered statistics of one plane pair.
struct PlaneStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

impl PlaneStats {
    fn new(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Self {
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        PlaneStats {
            mx: filter_valid(x, h, w, g),
            my: filter_valid(y, h, w, g),
            exx: filter_valid(&xx, h, w, g),
            eyy: filter_valid(&yy, h, w, g),
            exy: filter_valid(&xy, h, w, g),
        }
    }

    /// `(A1, A2, B1, B2)` at position `i`; SSIM is `A1 A2 / (B1 B2)`.
    fn terms(&self, i: usize) -> (f64, f64, f64, f64) {
        let (mx, my) = (self.mx[i], self.my[i]);
        let vx = self.exx[i] - mx * mx;
        let vy = self.eyy[i] - my * my;
        let cov = self.exy[i] - mx * my;
        (
            2.0 * mx * my + SSIM_C1,
            2.0 * cov + SSIM_C2,
            mx * mx + my * my + SSIM_C1,
            vx + vy + SSIM_C2,
        )
    }
}

fn extract_plane(data: &[f64], image: usize, h: usize, w: usize, c: usize, ch: usize) -> Vec<f64> {
    let base = image * h * w * c;
    (0..h * w).map(|p| data[base + p * c + ch]).collect()
}

/// Mean SSIM over all valid window positions, channels and batch images.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", x.shape(), y.shape()));
    }
    let (b, h, w, c) = ssim_geometry(x.shape())?;
    let g = ssim_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for img in 0..b {
        for ch in 0..c {
            let px = extract_plane(x.data(), img, h, w, c, ch);
            let py = extract_plane(y.data(), img, h, w, c, ch);
            let stats = PlaneStats::new(&px, &py, h, w, &g);
            for i in 0..stats.mx.len() {
                let (a1, a2, b1, b2) = stats.terms(i);
                total += (a1 * a2) / (b1 * b2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

struct DssimOp {
    reference: Tensor,
}

impl CustomOp for DssimOp {
    fn name(&self) -> &str {
        "dssim"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar((1.0 - ssim(inputs[0], &self.reference)?) / 2.0))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (b, h, w, c) = ssim_geometry(x.shape())?;
        let g = ssim_kernel();
        let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
        let d_s = -grad_output.item() / (2.0 * (positions * b * c) as f64);
        let mut grad = vec![0.0; x.numel()];
        for img in 0..b {
            for ch in 0..c {
                let px = extract_plane(x.data(), img, h, w, c, ch);
                let py = extract_plane(self.reference.data(), img, h, w, c, ch);
                let stats = PlaneStats::new(&px, &py, h, w, &g);
                let mut g_mu = vec![0.0; positions];
                let mut g_xx = vec![0.0; positions];
                let mut g_xy = vec![0.0; positions];
                for i in 0..positions {
                    let (a1, a2, b1, b2) = stats.terms(i);
                    let s = (a1 * a2) / (b1 * b2);
                    let (mx, my) = (stats.mx[i], stats.my[i]);
                    g_mu[i] = d_s * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
                    g_xx[i] = -d_s * s / b2;
                    g_xy[i] = d_s * 2.0 * s / a2;
                }
                let back_mu = filter_adjoint(&g_mu, h, w, &g);
                let back_xx = filter_adjoint(&g_xx, h, w, &g);
                let back_xy = filter_adjoint(&g_xy, h, w, &g);
                let base = img * h * w * c;
                for p in 0..h * w {
                    grad[base + p * c + ch] = back_mu[p] + 2.0 * px[p] * back_xx[p] + py[p] * back_xy[p];
                }
            }
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), grad)?)])
    }
}

/// Structural dissimilarity `(1 − SSIM) / 2` with an 11×11 Gaussian window
/// (σ = 1.5), per-channel statistics and no padding.
pub fn dssim<'t>(rendered: &Var<'t>, reference: &Tensor) -> Result<Var<'t>> {
    same_shape("dssim", rendered, reference)?;
    ssim_geometry(reference.shape())?;
    rendered.tape().custom(
        &[*rendered],
        Box::new(DssimOp {
            reference: reference.clone(),
        }),
    )
}

/// Terms of a reconstruction objective.
#[derive(Clone, Copy)]
pub struct ReconstructionLoss<'t> {
    pub pixel: Var<'t>,
    /// Present when the variant includes DSSIM.
    pub perceptual: Option<Var<'t>>,
    /// `pixel + λ_perc · perceptual`, or exactly `pixel` when λ_perc is 0.
    pub total: Var<'t>,
}

pub fn reconstruction_loss<'t>(
    rendered: &Var<'t>,
    reference: &Tensor,
    lambda_perc: f64,
    variant: ReconstructionVariant,
) -> Result<ReconstructionLoss<'t>> {
    let pixel = match variant {
        ReconstructionVariant::Mse | ReconstructionVariant::MseDssim => mse(rendered, reference)?,
        ReconstructionVariant::Bce | ReconstructionVariant::BceDssim => bce(rendered, reference)?,
    };
    let perceptual = if variant.uses_dssim() {
        Some(dssim(rendered, reference)?)
    } else {
        None
    };
    let total = match perceptual {
        Some(p) if lambda_perc != 0.0 => pixel.add(&p.scale(lambda_perc))?,
        _ => pixel,
    };
    Ok(ReconstructionLoss {
        pixel,
        perceptual,
        total,
    })
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

pub fn mse_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("mse", x.shape(), y.shape()));
    }
    let n = x.numel() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}
