use rand::Rng;

use super::params::{Bound, ParamId, ParamSet};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
const EMBED_STD: f64 = 0.02;

/// Xavier-uniform weight `[fan_in, fan_out]`.
pub(crate) fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform([fan_in, fan_out], limit, rng)
}

pub(crate) fn embedding<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let t = Tensor::randn(shape.to_vec(), rng);
    Tensor::from_fn(shape.to_vec(), |i| EMBED_STD * t.data()[i])
}

/// Fixed 2D sine-cosine table `[grid², d]` over a `grid × grid` patch layout:
/// the first half of the channels encodes the row, the second the column.
pub(crate) fn sincos_2d(grid: usize, d: usize) -> Tensor {
    let quarter = (d / 4).max(1);
    Tensor::from_fn([grid * grid, d], |i| {
        let (patch, ch) = (i / d, i % d);
        let pos = if ch < d / 2 { patch / grid } else { patch % grid } as f64;
        let j = ch % (d / 2);
        let freq = 1.0 / 10000f64.powf((j % quarter) as f64 / quarter as f64);
        if j < quarter {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = ps.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng), true);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([fan_out]), false);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros([fan_in, fan_out]), true);
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([fan_out]), false);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    /// Applies to the last axis of any-rank input.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::shape("linear", &shape, &[self.fan_in, self.fan_out]));
        }
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let flat = if shape.len() == 2 { *x } else { x.reshape(&[rows, self.fan_in])? };
        let y = flat.matmul(&p.var(self.weight))?.add(&p.var(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.fan_out;
            y.reshape(&out)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::full([width], 1.0), false),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros([width]), false),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.layernorm(&p.var(self.gain), &p.var(self.bias), LN_EPS)
    }
}

/// Pre-norm transformer block: multi-head self-attention and a GELU MLP, each
/// wrapped in a residual connection.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, width: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Block {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            qkv: Linear::new(ps, &format!("{name}.attn.qkv"), width, 3 * width, rng),
            proj: Linear::new(ps, &format!("{name}.attn.proj"), width, width, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            fc1: Linear::new(ps, &format!("{name}.mlp.fc1"), width, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.mlp.fc2"), hidden, width, rng),
            heads,
        }
    }

    pub fn param_count(width: usize, hidden: usize) -> usize {
        4 * width
            + Linear::param_count(width, 3 * width)
            + Linear::param_count(width, width)
            + Linear::param_count(width, hidden)
            + Linear::param_count(hidden, width)
    }

    /// `x: [B, T, d] → [B, T, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.forward_with(p, x, false)
    }

    /// With `detach_attention` the attention weights enter the graph as
    /// constants, so gradients flow only through the values.
    pub fn forward_with<'t>(&self, p: &Bound<'t>, x: &Var<'t>, detach_attention: bool) -> Result<Var<'t>> {
        let shape = x.shape();
        let [b, t, d] = shape[..] else {
            return Err(Error::shape("block", &shape, &[0, 0, 0]));
        };
        let (h, dh) = (self.heads, d / self.heads);

        let normed = self.ln1.forward(p, x)?;
        let qkv = self
            .qkv
            .forward(p, &normed)?
            .reshape(&[b, t, 3, h, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[b * h, t, dh]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let mut attn = q.bmm_nt(&k)?.scale(1.0 / (dh as f64).sqrt()).softmax()?;
        if detach_attention {
            attn = x.tape().constant(attn.value().as_ref().clone());
        }
        let mixed = attn
            .bmm(&v)?
            .reshape(&[b, h, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        let x = x.add(&self.proj.forward(p, &mixed)?)?;

        let normed = self.ln2.forward(p, &x)?;
        let hidden = self.fc1.forward(p, &normed)?.gelu();
        x.add(&self.fc2.forward(p, &hidden)?)
    }
}
