//! Forward kernels and backward rules of the built-in ops.

use super::kernels::{self, gemm};
use super::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    /// Tanh approximation: `½x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    Gelu,
    Exp,
    Log,
    Neg,
    Square,
    Scale(f64),
    Offset(f64),
    /// Pass-through on `[lo, hi]`, zero gradient outside.
    Clamp(f64, f64),
}

impl UnaryKind {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Neg => "neg",
            UnaryKind::Square => "square",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Offset(_) => "offset",
            UnaryKind::Clamp(..) => "clamp",
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Neg => -x,
            UnaryKind::Square => x * x,
            UnaryKind::Scale(c) => c * x,
            UnaryKind::Offset(c) => x + c,
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Neg => -1.0,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Scale(c) => c,
            UnaryKind::Offset(_) => 1.0,
            UnaryKind::Clamp(lo, hi) => {
                if x < lo || x > hi {
                    0.0
                } else {
                    1.0
                }
            }
        }
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

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Tensor::new([m, n], out)
}

pub(crate) fn bmm_forward(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(Error::shape("bmm", sa, sb));
    }
    let (batch, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if kb != k {
        return Err(Error::shape("bmm", sa, sb));
    }
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            false,
            &b.data()[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    Tensor::new([batch, m, n], out)
}

/// Number of elements after which the right operand repeats.
fn broadcast_inner(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(1);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(nb);
    }
    Err(Error::shape(op, a, b))
}

pub(crate) fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<(Tensor, usize)> {
    let inner = broadcast_inner(kind.tag(), a.shape(), b.shape())?;
    let bd = b.data();
    let data: Vec<f64> = match kind {
        BinaryKind::Add => a.data().iter().enumerate().map(|(i, x)| x + bd[i % inner]).collect(),
        BinaryKind::Sub => a.data().iter().enumerate().map(|(i, x)| x - bd[i % inner]).collect(),
        BinaryKind::Mul => a.data().iter().enumerate().map(|(i, x)| x * bd[i % inner]).collect(),
    };
    Ok((Tensor::new(a.shape().to_vec(), data)?, inner))
}

pub(crate) fn unary_forward(kind: UnaryKind, x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::shape(op, t.shape(), &[])),
    }
}

pub(crate) fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    let n = last_dim("softmax", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn layernorm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = last_dim("layernorm", x)?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::validation("layernorm eps must be positive"));
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.numel()];
    let (g, b) = (gain.data(), bias.data());
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, rstd))
}

pub(crate) fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape("narrow", shape, &[axis, start, len]));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = len;
    Tensor::new(s, out)
}

pub(crate) fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::validation("concat of zero tensors"))?;
    let shape = first.shape();
    if axis >= shape.len() {
        return Err(Error::shape("concat", shape, &[axis]));
    }
    for p in parts {
        let ok = p.ndim() == shape.len()
            && p.shape()
                .iter()
                .zip(shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", shape, p.shape()));
        }
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut s = shape.to_vec();
    s[axis] = total;
    Tensor::new(s, out)
}

pub(crate) fn mean_axis_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::shape("mean_axis", shape, &[axis]));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let src = &x.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
            out[o * inner..(o + 1) * inner]
                .iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d += s);
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    let mut s = shape.to_vec();
    s.remove(axis);
    Tensor::new(s, out)
}

pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape("cross_entropy", s, &[labels.len()]));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let probs = softmax_forward(logits)?.into_data();
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok((loss / labels.len() as f64, probs))
}

/// Gradient contributions for each parent of a node, in parent order.
pub(crate) fn backward(
    op: &Op,
    parents: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    needs: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let res = match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (a, b) = (parents[0], parents[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, 0.0);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, 0.0);
                gb
            });
            vec![ga, gb]
        }
        Op::Bmm { trans_b } => {
            let (a, b) = (parents[0], parents[1]);
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = out.shape()[2];
            let mut ga = needs[0].then(|| vec![0.0; batch * m * k]);
            let mut gb = needs[1].then(|| vec![0.0; batch * k * n]);
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                if let Some(ga) = ga.as_mut() {
                    // ga = g · bᵀ (b logical [k, n])
                    gemm(m, n, k, gi, false, bi, !trans_b, &mut ga[i * m * k..(i + 1) * m * k], 0.0);
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // b stored [n, k]: gb = gᵀ · a
                        gemm(n, m, k, gi, true, ai, false, dst, 0.0);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, dst, 0.0);
                    }
                }
            }
            vec![ga, gb]
        }
        Op::Binary { kind, inner } => {
            let (a, b) = (parents[0], parents[1]);
            let inner = *inner;
            let bd = b.data();
            let ga = needs[0].then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[i % inner]).collect(),
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; inner];
                match kind {
                    BinaryKind::Add => g.iter().enumerate().for_each(|(i, gi)| gb[i % inner] += gi),
                    BinaryKind::Sub => g.iter().enumerate().for_each(|(i, gi)| gb[i % inner] -= gi),
                    BinaryKind::Mul => {
                        let ad = a.data();
                        g.iter()
                            .enumerate()
                            .for_each(|(i, gi)| gb[i % inner] += gi * ad[i])
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Unary(kind) => {
            let x = parents[0].data();
            let y = out.data();
            vec![Some(
                g.iter()
                    .enumerate()
                    .map(|(i, gi)| gi * kind.derivative(x[i], y[i]))
                    .collect(),
            )]
        }
        Op::Softmax => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::LayerNorm { xhat, rstd } => {
            let gain = parents[1].data();
            let d = gain.len();
            let rows = g.len() / d;
            let mut gx = vec![0.0; g.len()];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_gh = 0.0;
                let mut sum_ghx = 0.0;
                for j in 0..d {
                    let gh = gr[j] * gain[j];
                    sum_gh += gh;
                    sum_ghx += gh * hr[j];
                    ggain[j] += gr[j] * hr[j];
                    gbias[j] += gr[j];
                }
                let scale = rstd[r] / d as f64;
                for j in 0..d {
                    let gh = gr[j] * gain[j];
                    gx[r * d + j] = scale * (d as f64 * gh - sum_gh - hr[j] * sum_ghx);
                }
            }
            vec![Some(gx), Some(ggain), Some(gbias)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Permute(perm) => {
            let inv = kernels::inverse_permutation(perm);
            let (_, data) = kernels::permute(g, out.shape(), &inv);
            vec![Some(data)]
        }
        Op::Narrow { axis, start } => {
            let shape = parents[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[*axis];
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; parents[0].numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gx)]
        }
        Op::Concat { axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            parents
                .iter()
                .map(|p| {
                    let len = p.shape()[*axis] * inner;
                    let mut gp = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    Some(gp)
                })
                .collect()
        }
        Op::Sum => vec![Some(vec![g[0]; parents[0].numel()])],
        Op::Mean => {
            let n = parents[0].numel().max(1) as f64;
            vec![Some(vec![g[0] / n; parents[0].numel()])]
        }
        Op::MeanAxis { axis } => {
            let shape = parents[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let n = shape[*axis];
            let mut gx = vec![0.0; parents[0].numel()];
            for o in 0..outer {
                for a in 0..n {
                    let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[o * inner..(o + 1) * inner])
                        .for_each(|(d, s)| *d = s / n as f64);
                }
            }
            vec![Some(gx)]
        }
        Op::CrossEntropy { labels, probs } => {
            let c = parents[0].shape()[1];
            let b = labels.len() as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
            for (r, &y) in labels.iter().enumerate() {
                gx[r * c + y] -= g[0] / b;
            }
            vec![Some(gx)]
        }
        Op::Custom(custom) => {
            let grad_out = Tensor::new(out.shape().to_vec(), g.to_vec())?;
            let grads = custom.backward(parents, out, &grad_out, needs)?;
            if grads.len() != parents.len() {
                return Err(Error::Contract(format!(
                    "{} backward returned {} gradients for {} inputs",
                    custom.name(),
                    grads.len(),
                    parents.len()
                )));
            }
            let mut res = Vec::with_capacity(grads.len());
            for (i, (gi, p)) in grads.into_iter().zip(parents).enumerate() {
                match gi {
                    Some(t) if t.shape() != p.shape() => {
                        return Err(Error::Contract(format!(
                            "{} backward gradient {i} has shape {:?}, input has {:?}",
                            custom.name(),
                            t.shape(),
                            p.shape()
                        )))
                    }
                    other => res.push(other.map(Tensor::into_data)),
                }
            }
            res
        }
    };
    Ok(res)
}
