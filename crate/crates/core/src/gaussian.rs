//! The 9-parameter 2D Gaussian primitive.
//!
//! A Gaussian is stored as one row of 9 numbers laid out as
//! `(p_x, p_y, s_1, s_2, φ, r, g, b, o)`. Raw rows are unconstrained; decoding
//! maps them to a center in `[-1, 1]²` (tanh), scales in `(0, c)`
//! (`c · sigmoid`), an unbounded rotation angle, and color and opacity in
//! `(0, 1)` (sigmoid).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAMS_PER_GAUSSIAN: usize = 9;

/// Decoded scales at or below this are rejected before inversion.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Column indices of a Gaussian row.
pub mod col {
    pub const PX: usize = 0;
    pub const PY: usize = 1;
    pub const S1: usize = 2;
    pub const S2: usize = 3;
    pub const ROT: usize = 4;
    pub const RED: usize = 5;
    pub const GREEN: usize = 6;
    pub const BLUE: usize = 7;
    pub const OPACITY: usize = 8;
}

/// Upper bound `c` on decoded scales, in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBound(f64);

impl ScaleBound {
    pub fn new(c: f64) -> Result<Self> {
        if c > 0.0 && c.is_finite() {
            Ok(ScaleBound(c))
        } else {
            Err(Error::validation(format!("scale bound must be positive, got {c}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for ScaleBound {
    fn default() -> Self {
        ScaleBound(1.0)
    }
}

fn check_rows(params: &Tensor) -> Result<usize> {
    match params.shape() {
        [k, PARAMS_PER_GAUSSIAN] => Ok(*k),
        other => Err(Error::shape("gaussian batch", other, &[0, PARAMS_PER_GAUSSIAN])),
    }
}

/// Unconstrained Gaussian parameters, `[k, 9]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGaussianBatch {
    params: Tensor,
}

impl RawGaussianBatch {
    pub fn new(params: Tensor) -> Result<Self> {
        check_rows(&params)?;
        for (row, vals) in params.data().chunks(PARAMS_PER_GAUSSIAN).enumerate() {
            if let Some(c) = vals.iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "raw gaussian row {row} has non-finite value in column {c}"
                )));
            }
        }
        Ok(RawGaussianBatch { params })
    }

    pub fn len(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn into_tensor(self) -> Tensor {
        self.params
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.params.data()[i * PARAMS_PER_GAUSSIAN..(i + 1) * PARAMS_PER_GAUSSIAN]
    }
}

/// Activated Gaussian parameters, `[k, 9]`, same column layout as the raw form.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedGaussianBatch {
    params: Tensor,
}

impl DecodedGaussianBatch {
    /// Wraps already-decoded rows. Only the shape is checked; use
    /// [`DecodedGaussianBatch::check_ranges`] for the value invariants.
    pub fn new(params: Tensor) -> Result<Self> {
        check_rows(&params)?;
        Ok(DecodedGaussianBatch { params })
    }

    pub fn from_rows(rows: &[[f64; PARAMS_PER_GAUSSIAN]]) -> Self {
        let data = rows.iter().flatten().copied().collect();
        DecodedGaussianBatch {
            params: Tensor::new([rows.len(), PARAMS_PER_GAUSSIAN], data).expect("row layout"),
        }
    }

    pub fn len(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.params.data()[i * PARAMS_PER_GAUSSIAN..(i + 1) * PARAMS_PER_GAUSSIAN]
    }

    pub fn center(&self, i: usize) -> [f64; 2] {
        let r = self.row(i);
        [r[col::PX], r[col::PY]]
    }

    pub fn scales(&self, i: usize) -> [f64; 2] {
        let r = self.row(i);
        [r[col::S1], r[col::S2]]
    }

    pub fn rotation(&self, i: usize) -> f64 {
        self.row(i)[col::ROT]
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        let r = self.row(i);
        [r[col::RED], r[col::GREEN], r[col::BLUE]]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.row(i)[col::OPACITY]
    }

    /// Checks the decoded range invariants for bound `c`.
    pub fn check_ranges(&self, bound: ScaleBound) -> Result<()> {
        let c = bound.get();
        for i in 0..self.len() {
            let r = self.row(i);
            let ok = r.iter().all(|v| v.is_finite())
                && (-1.0..=1.0).contains(&r[col::PX])
                && (-1.0..=1.0).contains(&r[col::PY])
                && r[col::S1] > 0.0
                && r[col::S1] <= c
                && r[col::S2] > 0.0
                && r[col::S2] <= c
                && r[col::RED..=col::OPACITY].iter().all(|v| (0.0..=1.0).contains(v));
            if !ok {
                return Err(Error::validation(format!("decoded gaussian {i} out of range: {r:?}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Activation of one raw value in column `c` and its derivative.
fn activate(c: usize, x: f64, bound: f64) -> (f64, f64) {
    match c {
        col::PX | col::PY => {
            let t = x.tanh();
            (t, 1.0 - t * t)
        }
        col::S1 | col::S2 => {
            let s = sigmoid(x);
            (bound * s, bound * s * (1.0 - s))
        }
        col::ROT => (x, 1.0),
        _ => {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        }
    }
}

fn decode_values(raw: &[f64], bound: f64) -> Vec<f64> {
    raw.iter()
        .enumerate()
        .map(|(i, &x)| activate(i % PARAMS_PER_GAUSSIAN, x, bound).0)
        .collect()
}

/// Applies the per-column activations.
pub fn decode(raw: &RawGaussianBatch, bound: ScaleBound) -> Result<DecodedGaussianBatch> {
    let data = decode_values(raw.params.data(), bound.get());
    DecodedGaussianBatch::new(Tensor::new(raw.params.shape().to_vec(), data)?)
}

/// Inverse of [`decode`] on the open ranges (atanh / logit). Values on the
/// boundary of a range map to infinities and are rejected.
pub fn encode(decoded: &DecodedGaussianBatch, bound: ScaleBound) -> Result<RawGaussianBatch> {
    let c = bound.get();
    let data = decoded
        .params
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| match i % PARAMS_PER_GAUSSIAN {
            col::PX | col::PY => v.atanh(),
            col::S1 | col::S2 => logit(v / c),
            col::ROT => v,
            _ => logit(v),
        })
        .collect();
    RawGaussianBatch::new(Tensor::new(decoded.params.shape().to_vec(), data)?)
}

struct DecodeOp {
    bound: f64,
}

impl CustomOp for DecodeOp {
    fn name(&self) -> &str {
        "decode_gaussians"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let raw = inputs[0];
        if raw.shape().last() != Some(&PARAMS_PER_GAUSSIAN) {
            return Err(Error::shape("decode_gaussians", raw.shape(), &[PARAMS_PER_GAUSSIAN]));
        }
        if let Some(pos) = raw.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "raw gaussian row {} has non-finite value in column {}",
                pos / PARAMS_PER_GAUSSIAN,
                pos % PARAMS_PER_GAUSSIAN
            )));
        }
        Tensor::new(raw.shape().to_vec(), decode_values(raw.data(), self.bound))
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let raw = inputs[0];
        let g = Tensor::from_fn(raw.shape().to_vec(), |i| {
            grad_output.data()[i] * activate(i % PARAMS_PER_GAUSSIAN, raw.data()[i], self.bound).1
        });
        Ok(vec![Some(g)])
    }
}

/// Differentiable decode of a `[..., 9]` variable.
pub fn decode_var<'t>(raw: &Var<'t>, bound: ScaleBound) -> Result<Var<'t>> {
    raw.tape().custom(&[*raw], Box::new(DecodeOp { bound: bound.get() }))
}

/// `Σ = R(φ) diag(s₁², s₂²) R(φ)ᵀ` with its inverse and determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance {
    pub sigma: [[f64; 2]; 2],
    pub inverse: [[f64; 2]; 2],
    pub det: f64,
}

pub fn covariance(scales: [f64; 2], rotation: f64) -> Result<Covariance> {
    covariance_checked(0, scales, rotation)
}

pub(crate) fn covariance_checked(row: usize, scales: [f64; 2], rotation: f64) -> Result<Covariance> {
    let [s1, s2] = scales;
    for s in [s1, s2] {
        if !(s > SCALE_FLOOR) {
            return Err(Error::DegenerateGaussian {
                row,
                scale: s,
                floor: SCALE_FLOOR,
            });
        }
    }
    let (c, s) = (rotation.cos(), rotation.sin());
    let (v1, v2) = (s1 * s1, s2 * s2);
    let (u1, u2) = (1.0 / v1, 1.0 / v2);
    let off = c * s * (v1 - v2);
    let off_inv = c * s * (u1 - u2);
    Ok(Covariance {
        sigma: [[c * c * v1 + s * s * v2, off], [off, s * s * v1 + c * c * v2]],
        inverse: [[c * c * u1 + s * s * u2, off_inv], [off_inv, s * s * u1 + c * c * u2]],
        det: v1 * v2,
    })
}

/// Covariance of row `i` of a decoded batch.
pub fn covariance_of(batch: &DecodedGaussianBatch, i: usize) -> Result<Covariance> {
    covariance_checked(i, batch.scales(i), batch.rotation(i))
}

/// `k` rows of i.i.d. standard normal raw parameters.
pub fn init_random(k: usize, seed: u64) -> Result<RawGaussianBatch> {
    init_random_with(k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn init_random_with<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<RawGaussianBatch> {
    if k == 0 {
        return Err(Error::validation("gaussian count must be at least 1"));
    }
    RawGaussianBatch::new(Tensor::randn([k, PARAMS_PER_GAUSSIAN], rng))
}

/// Normalized coordinate of pixel `i` on an axis of `n` pixels; the first
/// pixel sits at −1 and the last at +1.
pub fn pixel_to_ndc(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

const KMEANS_ITERATIONS: usize = 20;

/// Lower clamp for initialized scales, as a fraction of the bound.
const KMEANS_SCALE_EPS: f64 = 1e-3;

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn nearest(p: &[f64; 3], centers: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// One Gaussian per k-means cluster of the image's RGB values.
///
/// Clusters are seeded with k-means++ and refined for a fixed 20 Lloyd
/// iterations. Each Gaussian sits at its cluster's mean pixel position with the
/// cluster's mean color, axis-aligned, with per-axis scales equal to the
/// positional standard deviation of the cluster (clamped inside `(ε, c − ε)`)
/// and raw opacity 0.
pub fn init_kmeans_colors(image: &Tensor, k: usize, seed: u64, bound: ScaleBound) -> Result<RawGaussianBatch> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        other => return Err(Error::shape("init_kmeans_colors", other, &[0, 0, 3])),
    };
    let n = h * w;
    if k == 0 || k > n {
        return Err(Error::validation(format!(
            "k-means needs 1 <= k <= pixel count ({n}), got k = {k}"
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::validation("image values must lie in [0, 1]"));
    }
    let pixels: Vec<[f64; 3]> = image
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers = vec![pixels[rng.gen_range(0..n)]];
    let mut dist: Vec<f64> = pixels.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = pixels[pick];
        for (d, p) in dist.iter_mut().zip(&pixels) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERATIONS {
        for (a, p) in assign.iter_mut().zip(&pixels) {
            *a = nearest(p, &centers).0;
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assign.iter().zip(&pixels) {
            counts[*a] += 1;
            for ch in 0..3 {
                sums[*a][ch] += p[ch];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
    }
    for (a, p) in assign.iter_mut().zip(&pixels) {
        *a = nearest(p, &centers).0;
    }

    let c = bound.get();
    let eps = KMEANS_SCALE_EPS * c;
    let to_raw_scale = |sd: f64| logit(sd.clamp(eps, c - eps) / c);
    let to_raw_unit = |v: f64| logit(v.clamp(1e-6, 1.0 - 1e-6));
    let to_raw_pos = |v: f64| v.clamp(-1.0 + 1e-9, 1.0 - 1e-9).atanh();
    let spacing = 2.0 / (h.max(w).max(2) - 1) as f64;

    let mut rows = Vec::with_capacity(k * PARAMS_PER_GAUSSIAN);
    for j in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == j).collect();
        let (pos, sd, color) = if members.is_empty() {
            let i = rng.gen_range(0..n);
            let pos = [pixel_to_ndc(i % w, w), pixel_to_ndc(i / w, h)];
            (pos, [spacing, spacing], centers[j])
        } else {
            let m = members.len() as f64;
            let xs: Vec<f64> = members.iter().map(|&i| pixel_to_ndc(i % w, w)).collect();
            let ys: Vec<f64> = members.iter().map(|&i| pixel_to_ndc(i / w, h)).collect();
            let mx = xs.iter().sum::<f64>() / m;
            let my = ys.iter().sum::<f64>() / m;
            let sx = (xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / m).sqrt();
            let sy = (ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / m).sqrt();
            let mut color = [0.0; 3];
            for &i in &members {
                for ch in 0..3 {
                    color[ch] += pixels[i][ch] / m;
                }
            }
            ([mx, my], [sx, sy], color)
        };
        rows.extend_from_slice(&[
            to_raw_pos(pos[0]),
            to_raw_pos(pos[1]),
            to_raw_scale(sd[0]),
            to_raw_scale(sd[1]),
            0.0,
            to_raw_unit(color[0]),
            to_raw_unit(color[1]),
            to_raw_unit(color[2]),
            0.0,
        ]);
    }
    RawGaussianBatch::new(Tensor::new([k, PARAMS_PER_GAUSSIAN], rows)?)
}
