use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gaussian::{decode, decode_var, init_kmeans_colors, init_random_with, RawGaussianBatch, ScaleBound};
use crate::losses::{mse_value, reconstruction_loss, ReconstructionVariant};
use crate::models::ParamSet;
use crate::raster::{render, render_var, RenderTarget};
use crate::seeding::{purpose, stream};
use crate::tensor::Tensor;

use super::optim::{adamw_step, lr_schedule, AdamW, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitInit {
    #[default]
    Random,
    KMeans,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Peak learning rate; decays along a cosine to 0 at the last step.
    pub lr: f64,
    pub seed: u64,
    pub variant: ReconstructionVariant,
    pub lambda_perc: f64,
    pub scale_bound: f64,
    pub init: FitInit,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lr: 0.02,
            seed: 0,
            variant: ReconstructionVariant::Mse,
            lambda_perc: 0.0,
            scale_bound: 1.0,
            init: FitInit::Random,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub raw: RawGaussianBatch,
    /// Reconstruction loss before each update.
    pub losses: Vec<f64>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

fn render_mse(raw: &RawGaussianBatch, bound: ScaleBound, target: &RenderTarget, image: &Tensor) -> Result<f64> {
    let img = render(&decode(raw, bound)?, target)?.image;
    mse_value(&img, image)
}

/// Optimizes one Gaussian set against one `[H, W, 3]` image with AdamW on the
/// reconstruction loss.
pub fn fit_image_sgd(image: &Tensor, k: usize, steps: usize, opts: FitOptions) -> Result<FitResult> {
    let [h, w, 3] = image.shape()[..] else {
        return Err(Error::shape("fit_image_sgd", image.shape(), &[0, 0, 3]));
    };
    if steps == 0 {
        return Err(Error::validation("fitting needs at least one step"));
    }
    let bound = ScaleBound::new(opts.scale_bound)?;
    let target = RenderTarget::new(w, h)?;
    let init = match opts.init {
        FitInit::Random => init_random_with(k, &mut stream(opts.seed, purpose::FIT, 0))?,
        FitInit::KMeans => init_kmeans_colors(image, k, opts.seed, bound)?,
    };
    let initial_mse = render_mse(&init, bound, &target, image)?;

    let mut params = ParamSet::new();
    let id = params.add("gaussians", init.into_tensor(), false);
    let mut state = OptimizerState::new(&params);
    let hp = AdamW {
        weight_decay: 0.0,
        beta2: 0.999,
        ..AdamW::default()
    };
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let tape = Tape::new();
        let raw = tape.param(params.get(id).clone());
        let img = render_var(&decode_var(&raw, bound)?, &target)?;
        let loss = reconstruction_loss(&img, image, opts.lambda_perc, opts.variant)?.total;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: format!("reconstruction loss at step {step}"),
            });
        }
        losses.push(value);
        let grads = tape.gradients(&loss, &[raw])?;
        let lr = lr_schedule(step as u64, steps as u64, 0, opts.lr, 256);
        adamw_step(&mut params, &grads, &mut state, lr, &hp)?;
    }
    let raw = RawGaussianBatch::new(params.get(id).clone())?;
    let final_mse = render_mse(&raw, bound, &target, image)?;
    Ok(FitResult {
        raw,
        losses,
        initial_mse,
        final_mse,
    })
}
