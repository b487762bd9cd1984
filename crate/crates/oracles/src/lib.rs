//! Independent reference implementations for the gvit test suites.
//!
//! Nothing here depends on `gvit-core`: every routine works on plain slices and
//! is written as the most literal transliteration of the math it checks, with
//! no culling, tiling, caching, or fused kernels. Speed is irrelevant.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleError {
    pub coordinate: usize,
    pub message: String,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "oracle failure at coordinate {}: {}", self.coordinate, self.message)
    }
}

impl std::error::Error for OracleError {}

/// Central-difference settings.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffSpec {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for FiniteDiffSpec {
    fn default() -> Self {
        FiniteDiffSpec {
            h: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn finite_diff<F>(mut f: F, point: &[f64], h: f64) -> Result<Vec<f64>, OracleError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OracleError {
                coordinate: i,
                message: format!("non-finite evaluation f(x+h)={fp}, f(x-h)={fm}"),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between two gradient vectors and where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b, floor))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Result of [`reference_render`].
#[derive(Debug, Clone)]
pub struct ReferenceImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub pixels: Vec<f64>,
    /// Σ over pixels of `αᵢ Tᵢ` per Gaussian.
    pub coverage: Vec<f64>,
}

/// Normalized coordinate of pixel index `i` on an axis of `n` pixels, with the
/// first pixel at −1 and the last at +1.
pub fn pixel_to_ndc(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Scalar-loop splatting of decoded Gaussians, each laid out as
/// `[px, py, s1, s2, phi, r, g, b, opacity]`, composited front to back in
/// sequence order over `background`.
pub fn reference_render(
    gaussians: &[[f64; 9]],
    width: usize,
    height: usize,
    background: [f64; 3],
    alpha_clamp: f64,
) -> ReferenceImage {
    // Σ = R S Sᵀ Rᵀ assembled by explicit matrix products, inverted by adjugate.
    let inverses: Vec<[[f64; 2]; 2]> = gaussians
        .iter()
        .map(|g| {
            let (c, s) = (g[4].cos(), g[4].sin());
            let r = [[c, -s], [s, c]];
            let ss = [[g[2] * g[2], 0.0], [0.0, g[3] * g[3]]];
            let sigma = matmul2(&matmul2(&r, &ss), &transpose2(&r));
            let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
            [
                [sigma[1][1] / det, -sigma[0][1] / det],
                [-sigma[1][0] / det, sigma[0][0] / det],
            ]
        })
        .collect();

    let mut pixels = vec![0.0; width * height * 3];
    let mut coverage = vec![0.0; gaussians.len()];
    for row in 0..height {
        for col in 0..width {
            let x = pixel_to_ndc(col, width);
            let y = pixel_to_ndc(row, height);
            let mut color = [0.0; 3];
            let mut transmittance = 1.0;
            for (i, g) in gaussians.iter().enumerate() {
                let d = [x - g[0], y - g[1]];
                let inv = &inverses[i];
                let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1])
                    + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
                let weight = (-0.5 * q).exp();
                let alpha = (g[8] * weight).min(alpha_clamp);
                for ch in 0..3 {
                    color[ch] += alpha * transmittance * g[5 + ch];
                }
                coverage[i] += alpha * transmittance;
                transmittance *= 1.0 - alpha;
            }
            for ch in 0..3 {
                pixels[(row * width + col) * 3 + ch] = color[ch] + transmittance * background[ch];
            }
        }
    }
    ReferenceImage {
        width,
        height,
        pixels,
        coverage,
    }
}

fn matmul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose2(a: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Covariance `R(φ) diag(s₁², s₂²) R(φ)ᵀ` by explicit matrix products.
pub fn covariance_by_products(s1: f64, s2: f64, phi: f64) -> [[f64; 2]; 2] {
    let (c, s) = (phi.cos(), phi.sin());
    let r = [[c, -s], [s, c]];
    let ss = [[s1 * s1, 0.0], [0.0, s2 * s2]];
    matmul2(&matmul2(&r, &ss), &transpose2(&r))
}

/// Hyperparameters for [`adamw_reference`].
#[derive(Debug, Clone, Copy)]
pub struct AdamReference {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Scalar AdamW trajectory: returns the parameter after each step.
pub fn adamw_reference(mut p: f64, grads: &[f64], h: AdamReference) -> Vec<f64> {
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        let m_hat = m / (1.0 - h.beta1.powi(t));
        let v_hat = v / (1.0 - h.beta2.powi(t));
        p -= h.lr * h.weight_decay * p;
        p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        out.push(p);
    }
    out
}

/// Normalized 11×11 Gaussian window with σ = 1.5 (row-major).
pub fn ssim_window() -> Vec<f64> {
    let mut w = vec![0.0; 121];
    let mut total = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            let v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            w[i * 11 + j] = v;
            total += v;
        }
    }
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean SSIM over all valid 11×11 windows and all channels of two
/// `H × W × C` images with unit dynamic range.
pub fn ssim_direct(x: &[f64], y: &[f64], height: usize, width: usize, channels: usize) -> f64 {
    assert!(height >= 11 && width >= 11);
    let w = ssim_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        for r0 in 0..=height - 11 {
            for c0 in 0..=width - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let idx = ((r0 + i) * width + (c0 + j)) * channels + ch;
                        let wt = w[i * 11 + j];
                        mx += wt * x[idx];
                        my += wt * y[idx];
                        xx += wt * x[idx] * x[idx];
                        yy += wt * y[idx] * y[idx];
                        xy += wt * x[idx] * y[idx];
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits `s_c = Σ_t w[t][c] θ_t + b_c` of a linear classifier over the
/// flattened Gaussian parameters `θ` (`weights` is `len(θ) × C`, row-major).
pub fn linear_logits(theta: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let c = bias.len();
    assert_eq!(weights.len(), theta.len() * c);
    (0..c)
        .map(|k| bias[k] + theta.iter().enumerate().map(|(t, v)| v * weights[t * c + k]).sum::<f64>())
        .collect()
}

/// `∇θ H(softmax(s(θ)), y) = Σ_c (p_c − 1[c = y]) w_c` for the linear classifier.
pub fn linear_cls_gradient(theta: &[f64], weights: &[f64], bias: &[f64], label: usize) -> Vec<f64> {
    let c = bias.len();
    let p = softmax(&linear_logits(theta, weights, bias));
    (0..theta.len())
        .map(|t| {
            (0..c)
                .map(|k| (p[k] - if k == label { 1.0 } else { 0.0 }) * weights[t * c + k])
                .sum()
        })
        .collect()
}

/// Per-token attribution `S_i = Σ_j g_ij ∂s_c/∂g_ij = Σ_j g_ij w[(i, j)][c]`
/// for tokens of width `token_dim`.
pub fn linear_cdam(theta: &[f64], weights: &[f64], num_classes: usize, token_dim: usize, class: usize) -> Vec<f64> {
    theta
        .chunks(token_dim)
        .enumerate()
        .map(|(i, tok)| {
            tok.iter()
                .enumerate()
                .map(|(j, g)| g * weights[(i * token_dim + j) * num_classes + class])
                .sum()
        })
        .collect()
}
