//! The denoising Gaussian encoder and the Gaussian-token classifier.

mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{Block, LayerNorm, Linear, LN_EPS};
pub use params::{accumulate, Bound, Param, ParamId, ParamSet};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{RawGaussianBatch, PARAMS_PER_GAUSSIAN};
use crate::tensor::Tensor;

/// Width, depth and head count of a transformer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl TransformerConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::validation(format!(
                "{what} width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::validation(format!("{what} mlp hidden width must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Gaussians per image.
    pub k: usize,
    pub num_classes: usize,
    pub encoder: TransformerConfig,
    pub classifier: TransformerConfig,
    pub use_class_token: bool,
    /// Learned positions on classifier tokens; disabling makes the classifier
    /// invariant to Gaussian order.
    pub classifier_positions: bool,
    /// Layer norm after the classifier's last block.
    pub classifier_final_norm: bool,
    /// Maximum decoded Gaussian scale.
    pub scale_bound: f64,
}

impl ModelConfig {
    /// The acceptance-scale model on 32×32 images.
    pub fn toy(k: usize, num_classes: usize) -> Self {
        let t = TransformerConfig {
            width: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
        };
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            k,
            num_classes,
            encoder: t,
            classifier: t,
            use_class_token: true,
            classifier_positions: true,
            classifier_final_norm: true,
            scale_bound: 1.0,
        }
    }

    /// ViT-S-like encoder and classifier on 224×224 images.
    pub fn small(k: usize, num_classes: usize) -> Self {
        let t = TransformerConfig {
            width: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
        };
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            encoder: t,
            classifier: t,
            ..Self::toy(k, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::validation(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes must be at least 1"));
        }
        if !(self.scale_bound > 0.0 && self.scale_bound.is_finite()) {
            return Err(Error::validation("scale bound must be positive"));
        }
        self.encoder.validate("encoder")?;
        self.classifier.validate("classifier")
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub encoder: usize,
    pub classifier: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.encoder + self.classifier
    }
}

/// Learnable scalar counts derived from the architecture alone.
pub fn parameter_count(config: &ModelConfig) -> ParamCount {
    let g = PARAMS_PER_GAUSSIAN;
    let e = &config.encoder;
    let encoder = Linear::param_count(config.patch_dim(), e.width)
        + config.num_patches() * e.width
        + Linear::param_count(g, e.width)
        + e.width
        + e.depth * Block::param_count(e.width, e.mlp_hidden)
        + 2 * e.width
        + Linear::param_count(e.width, e.width)
        + Linear::param_count(e.width, g);
    let c = &config.classifier;
    let tokens = config.k + usize::from(config.use_class_token);
    let classifier = Linear::param_count(g, c.width)
        + if config.classifier_positions { tokens * c.width } else { 0 }
        + if config.use_class_token { c.width } else { 0 }
        + c.depth * Block::param_count(c.width, c.mlp_hidden)
        + if config.classifier_final_norm { 2 * c.width } else { 0 }
        + Linear::param_count(c.width, config.num_classes);
    ParamCount { encoder, classifier }
}

/// Splits `[B, H, W, 3]` images into `[B, N, P·P·3]` row-major patches.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, h, w, c] = images.shape()[..] else {
        return Err(Error::shape("patchify", images.shape(), &[0, 0, 0, 3]));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::validation(format!("{h}x{w} image is not divisible into {patch}x{patch} patches")));
    }
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for img in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for r in 0..patch {
                    let row = py * patch + r;
                    let start = ((img * h + row) * w + px * patch) * c;
                    out.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new([b, ph * pw, dim], out)
}

#[derive(Debug, Clone)]
struct EncoderLayout {
    patch_embed: Linear,
    pos: ParamId,
    lift: Linear,
    type_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

/// ViT over image patches plus Gaussian tokens that predicts a residual for
/// each Gaussian token: `ĝ = g₀ + Δg`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: EncoderLayout,
}

/// Tape outputs of [`Encoder::forward`].
#[derive(Clone, Copy)]
pub struct EncoderVars<'t> {
    /// `[B, k, 9]` refined raw Gaussians.
    pub raw: Var<'t>,
    /// `[B, k, 9]` predicted residuals.
    pub residual: Var<'t>,
}

/// Plain-tensor encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub raw_gaussians: Vec<RawGaussianBatch>,
    pub residuals: Tensor,
}

impl Encoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.encoder;
        let mut ps = ParamSet::new();
        let patch_embed = Linear::new(&mut ps, "encoder.patch_embed", config.patch_dim(), e.width, &mut rng);
        let pos = ps.add(
            "encoder.pos_embed",
            layers::sincos_2d(config.image_size / config.patch_size, e.width),
            false,
        );
        let lift = Linear::new(&mut ps, "encoder.gauss_embed", PARAMS_PER_GAUSSIAN, e.width, &mut rng);
        let type_embed = ps.add("encoder.gauss_type", layers::embedding(&[e.width], &mut rng), false);
        let blocks = (0..e.depth)
            .map(|i| Block::new(&mut ps, &format!("encoder.blocks.{i}"), e.width, e.heads, e.mlp_hidden, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut ps, "encoder.norm", e.width);
        let head1 = Linear::new(&mut ps, "encoder.head.fc1", e.width, e.width, &mut rng);
        let head2 = Linear::zeros(&mut ps, "encoder.head.fc2", e.width, PARAMS_PER_GAUSSIAN);
        Ok(Encoder {
            config,
            params: ps,
            layout: EncoderLayout {
                patch_embed,
                pos,
                lift,
                type_embed,
                blocks,
                norm,
                head1,
                head2,
            },
        })
    }

    /// Patch tokens plus learned positions, `[B, N, d]`.
    pub fn patch_embed<'t>(&self, p: &Bound<'t>, tape: &'t Tape, images: &Tensor) -> Result<Var<'t>> {
        let [_, h, w, 3] = images.shape()[..] else {
            return Err(Error::shape("encoder", images.shape(), &[0, 0, 0, 3]));
        };
        if h != self.config.image_size || w != self.config.image_size {
            return Err(Error::shape(
                "encoder",
                images.shape(),
                &[0, self.config.image_size, self.config.image_size, 3],
            ));
        }
        let patches = tape.constant(patchify(images, self.config.patch_size)?);
        self.layout.patch_embed.forward(p, &patches)?.add(&p.var(self.layout.pos))
    }

    /// `images: [B, H, W, 3]`, `g0: [B, k, 9]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, images: &Tensor, g0: &Var<'t>) -> Result<EncoderVars<'t>> {
        let tape = g0.tape();
        let b = images.shape().first().copied().unwrap_or(0);
        let k = self.config.k;
        if g0.shape() != [b, k, PARAMS_PER_GAUSSIAN] {
            return Err(Error::shape("encoder gaussians", &g0.shape(), &[b, k, PARAMS_PER_GAUSSIAN]));
        }
        let l = &self.layout;
        let patches = self.patch_embed(p, tape, images)?;
        let gauss = l.lift.forward(p, g0)?.add(&p.var(l.type_embed))?;
        let mut x = tape.concat(&[patches, gauss], 1)?;
        for block in &l.blocks {
            x = block.forward(p, &x)?;
        }
        let x = l.norm.forward(p, &x)?;
        let latents = x.narrow(1, self.config.num_patches(), k)?;
        let hidden = l.head1.forward(p, &latents)?.gelu();
        let residual = l.head2.forward(p, &hidden)?;
        Ok(EncoderVars {
            raw: g0.add(&residual)?,
            residual,
        })
    }

    /// Forward pass without gradients.
    pub fn infer(&self, images: &Tensor, g0: &Tensor) -> Result<EncoderOutput> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, images, &tape.constant(g0.clone()))?;
        let raw = out.raw.value();
        let b = raw.shape()[0];
        let raw_gaussians = (0..b)
            .map(|i| {
                let t = raw.slice_outer(i, 1)?.reshape([self.config.k, PARAMS_PER_GAUSSIAN])?;
                RawGaussianBatch::new(t)
            })
            .collect::<Result<_>>()?;
        Ok(EncoderOutput {
            raw_gaussians,
            residuals: out.residual.value().as_ref().clone(),
        })
    }
}

#[derive(Debug, Clone)]
struct ClassifierLayout {
    lift: Linear,
    pos: Option<ParamId>,
    cls: Option<ParamId>,
    blocks: Vec<Block>,
    norm: Option<LayerNorm>,
    head: Linear,
}

/// ViT over Gaussian tokens.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: ClassifierLayout,
}

/// Tape outputs of [`Classifier::forward`].
#[derive(Clone, Copy)]
pub struct ClassifierVars<'t> {
    /// `[B, C]`.
    pub logits: Var<'t>,
    /// Tokens entering the last transformer block (the embedded tokens when the
    /// classifier has no blocks), `[B, T, d]`. With a class token it sits at
    /// position 0.
    pub final_block_input: Var<'t>,
}

impl Classifier {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.classifier;
        let mut ps = ParamSet::new();
        let lift = Linear::new(&mut ps, "classifier.gauss_embed", PARAMS_PER_GAUSSIAN, c.width, &mut rng);
        let tokens = config.k + usize::from(config.use_class_token);
        let pos = config
            .classifier_positions
            .then(|| ps.add("classifier.pos_embed", layers::embedding(&[tokens, c.width], &mut rng), false));
        let cls = config
            .use_class_token
            .then(|| ps.add("classifier.cls_token", layers::embedding(&[c.width], &mut rng), false));
        let blocks = (0..c.depth)
            .map(|i| Block::new(&mut ps, &format!("classifier.blocks.{i}"), c.width, c.heads, c.mlp_hidden, &mut rng))
            .collect();
        let norm = config
            .classifier_final_norm
            .then(|| LayerNorm::new(&mut ps, "classifier.norm", c.width));
        let head = Linear::new(&mut ps, "classifier.head", c.width, config.num_classes, &mut rng);
        Ok(Classifier {
            config,
            params: ps,
            layout: ClassifierLayout {
                lift,
                pos,
                cls,
                blocks,
                norm,
                head,
            },
        })
    }

    /// `gaussians: [B, k, 9]` raw parameters.
    pub fn forward<'t>(&self, p: &Bound<'t>, gaussians: &Var<'t>) -> Result<ClassifierVars<'t>> {
        self.forward_with(p, gaussians, false)
    }

    /// [`Classifier::forward`], optionally treating attention weights as constants.
    pub fn forward_with<'t>(&self, p: &Bound<'t>, gaussians: &Var<'t>, detach_attention: bool) -> Result<ClassifierVars<'t>> {
        let tape = gaussians.tape();
        let shape = gaussians.shape();
        let k = self.config.k;
        let [b, kk, PARAMS_PER_GAUSSIAN] = shape[..] else {
            return Err(Error::shape("classifier", &shape, &[0, k, PARAMS_PER_GAUSSIAN]));
        };
        if kk != k {
            return Err(Error::shape("classifier", &shape, &[b, k, PARAMS_PER_GAUSSIAN]));
        }
        let l = &self.layout;
        let d = self.config.classifier.width;
        let mut x = l.lift.forward(p, gaussians)?;
        if let Some(cls) = l.cls {
            let slot = tape.constant(Tensor::zeros([b, 1, d])).add(&p.var(cls))?;
            x = tape.concat(&[slot, x], 1)?;
        }
        if let Some(pos) = l.pos {
            x = x.add(&p.var(pos))?;
        }
        let mut final_block_input = x;
        for block in &l.blocks {
            final_block_input = x;
            x = block.forward_with(p, &x, detach_attention)?;
        }
        if let Some(norm) = l.norm {
            x = norm.forward(p, &x)?;
        }
        let pooled = if l.cls.is_some() {
            x.narrow(1, 0, 1)?.reshape(&[b, d])?
        } else {
            x.mean_axis(1)?
        };
        Ok(ClassifierVars {
            logits: l.head.forward(p, &pooled)?,
            final_block_input,
        })
    }

    /// Logits without gradients, `[B, C]`.
    pub fn infer(&self, gaussians: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.forward(&p, &tape.constant(gaussians.clone()))?;
        Ok(out.logits.value().as_ref().clone())
    }

    /// Re-draws every classifier parameter while keeping the architecture.
    pub fn reinitialize(&mut self, seed: u64) -> Result<()> {
        *self = Classifier::new(self.config, seed)?;
        Ok(())
    }
}

/// Index of the largest value in each row of `[B, C]` logits.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
