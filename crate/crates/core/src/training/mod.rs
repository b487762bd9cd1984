//! Optimization: AdamW, the staged schedule, joint and guidance updates, and
//! the per-image fitting baseline.
//!
//! Gradients for a batch are computed on fixed-size chunks, each on its own
//! tape, possibly in parallel. Chunk gradients are weighted by their share of
//! the batch and summed in chunk order, so results do not depend on the
//! thread count.

mod augment;
mod fit;
mod optim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use augment::*;
pub use fit::*;
pub use optim::*;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::{decode, decode_var, RawGaussianBatch, ScaleBound, PARAMS_PER_GAUSSIAN};
use crate::losses::{cross_entropy, reconstruction_loss, LossWeights, ReconstructionVariant};
use crate::models::{accumulate, argmax_rows, Classifier, Encoder, ModelConfig};
use crate::raster::{render, render_var, RenderMode, RenderTarget};
use crate::seeding::{purpose, stream};
use crate::tensor::Tensor;

/// Images per tape when computing batch gradients.
pub const DEFAULT_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Encoder alone on the pixel loss.
    EncoderWarmup,
    /// Encoder alone with the perceptual term switched on.
    Perceptual,
    /// Classifier alone on frozen encoder outputs.
    ClassifierPretrain,
    /// Encoder and classifier together.
    Joint,
    /// Joint training with interleaved guidance steps.
    Guidance,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::EncoderWarmup,
        Phase::Perceptual,
        Phase::ClassifierPretrain,
        Phase::Joint,
        Phase::Guidance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::EncoderWarmup => "warmup_encoder",
            Phase::Perceptual => "perc_on",
            Phase::ClassifierPretrain => "classifier_pretrain",
            Phase::Joint => "classifier_joint",
            Phase::Guidance => "guidance",
        }
    }

    /// Phases sharing one learning-rate schedule.
    fn stage(self) -> usize {
        match self {
            Phase::EncoderWarmup | Phase::Perceptual => 0,
            Phase::ClassifierPretrain => 1,
            Phase::Joint | Phase::Guidance => 2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhaseEpochs {
    pub warmup_encoder: usize,
    pub perc_on: usize,
    pub classifier_pretrain: usize,
    pub classifier_joint: usize,
    pub guidance: usize,
}

impl PhaseEpochs {
    pub fn get(&self, phase: Phase) -> usize {
        match phase {
            Phase::EncoderWarmup => self.warmup_encoder,
            Phase::Perceptual => self.perc_on,
            Phase::ClassifierPretrain => self.classifier_pretrain,
            Phase::Joint => self.classifier_joint,
            Phase::Guidance => self.guidance,
        }
    }

    pub fn total(&self) -> usize {
        Phase::ALL.iter().map(|&p| self.get(p)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Learning rate at batch size 256; the peak is scaled linearly with the
    /// actual batch size.
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: PhaseEpochs,
    /// Linear warmup length of each schedule, capped at half of it.
    pub warmup_epochs: usize,
    pub optimizer: AdamW,
    pub guidance_every: usize,
    pub weights: LossWeights,
    pub variant: ReconstructionVariant,
    pub augment: Augment,
    pub seed: u64,
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            batch_size: 4096,
            epochs: PhaseEpochs {
                warmup_encoder: 100,
                perc_on: 50,
                classifier_pretrain: 50,
                classifier_joint: 100,
                guidance: 50,
            },
            warmup_epochs: 10,
            optimizer: AdamW::default(),
            guidance_every: 10,
            weights: LossWeights::default(),
            variant: ReconstructionVariant::default(),
            augment: Augment { hflip: true, crop: true },
            seed: 0,
            chunk_size: DEFAULT_CHUNK,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validated()?;
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::validation("batch_size and chunk_size must be positive"));
        }
        if self.guidance_every == 0 {
            return Err(Error::validation("guidance_every must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::validation(format!("base_lr must be non-negative, got {}", self.base_lr)));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::validation("optimizer needs betas in [0, 1), eps > 0 and weight_decay ≥ 0"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.total()
    }

    /// Phase of zero-based `epoch`, or `None` past the end.
    pub fn phase_of(&self, epoch: usize) -> Option<Phase> {
        let mut start = 0;
        for p in Phase::ALL {
            start += self.epochs.get(p);
            if epoch < start {
                return Some(p);
            }
        }
        None
    }

    fn first_epoch_of(&self, phase: Phase) -> usize {
        Phase::ALL.iter().take_while(|&&p| p != phase).map(|&p| self.epochs.get(p)).sum()
    }

    /// `(first epoch, epoch count)` of the schedule group containing `phase`.
    fn stage_span(&self, phase: Phase) -> (usize, usize) {
        let members: Vec<Phase> = Phase::ALL.into_iter().filter(|p| p.stage() == phase.stage()).collect();
        let start = self.first_epoch_of(members[0]);
        (start, members.iter().map(|&p| self.epochs.get(p)).sum())
    }
}

/// Encoder plus classifier sharing one model configuration.
#[derive(Debug, Clone)]
pub struct Models {
    pub encoder: Encoder,
    pub classifier: Classifier,
    pub render_mode: RenderMode,
}

impl Models {
    /// Encoder weights from `seed`, classifier weights from `seed + 1`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Models {
            encoder: Encoder::new(config, seed)?,
            classifier: Classifier::new(config, seed.wrapping_add(1))?,
            render_mode: RenderMode::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.config
    }

    pub fn bound(&self) -> Result<ScaleBound> {
        ScaleBound::new(self.config().scale_bound)
    }

    pub fn render_target(&self) -> Result<RenderTarget> {
        let s = self.config().image_size;
        Ok(RenderTarget::new(s, s)?.with_mode(self.render_mode))
    }
}

/// Images, labels and initial Gaussians for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, S, S, 3]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `[B, k, 9]` raw initial Gaussians.
    pub g0: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn chunk(&self, start: usize, len: usize) -> Result<Batch> {
        Ok(Batch {
            images: self.images.slice_outer(start, len)?,
            labels: self.labels[start..start + len].to_vec(),
            g0: self.g0.slice_outer(start, len)?,
        })
    }
}

/// Standard-normal raw Gaussians `[B, k, 9]`.
pub fn sample_g0(b: usize, k: usize, seed: u64, purpose: u64, index: u64) -> Tensor {
    Tensor::randn([b, k, PARAMS_PER_GAUSSIAN], &mut stream(seed, purpose, index))
}

/// Initial Gaussians used at evaluation time for dataset item `index`.
pub fn eval_g0(seed: u64, index: usize, k: usize) -> Tensor {
    sample_g0(1, k, seed, purpose::EVAL_G0, index as u64)
}

/// Per-step loss components averaged over the batch. Components that the
/// step did not compute are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub l_pix: f64,
    pub l_perc: f64,
    pub l_cls: f64,
    pub total: f64,
    /// Correct predictions among `count` images, before the update.
    pub correct: usize,
    pub count: usize,
}

impl StepReport {
    fn empty() -> Self {
        StepReport {
            l_pix: 0.0,
            l_perc: 0.0,
            l_cls: 0.0,
            total: 0.0,
            correct: 0,
            count: 0,
        }
    }

    fn add_weighted(&mut self, other: &StepReport, w: f64) {
        self.l_pix += w * other.l_pix;
        self.l_perc += w * other.l_perc;
        self.l_cls += w * other.l_cls;
        self.total += w * other.total;
        self.correct += other.correct;
        self.count += other.count;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Encoder on the reconstruction loss.
    Reconstruction,
    /// Classifier on frozen encoder outputs.
    Classifier,
    /// Both models on the combined loss.
    Joint,
    /// Encoder on reconstruction plus γ times the classification loss, with the
    /// classifier held constant.
    Guidance,
}

/// Everything a single update needs besides models, batch and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub weights: LossWeights,
    pub variant: ReconstructionVariant,
    /// Whether the perceptual term enters the objective (it is always reported
    /// when the variant has one).
    pub perceptual: bool,
    pub lr: f64,
    pub optimizer: AdamW,
    pub chunk_size: usize,
}

impl StepSettings {
    pub fn new(weights: LossWeights, lr: f64) -> Self {
        StepSettings {
            weights,
            variant: ReconstructionVariant::default(),
            perceptual: true,
            lr,
            optimizer: AdamW::default(),
            chunk_size: DEFAULT_CHUNK,
        }
    }

    fn lambda_perc(&self) -> f64 {
        if self.perceptual {
            self.weights.lambda_perc
        } else {
            0.0
        }
    }
}

/// Batch-mean gradients of one step kind.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub encoder: Option<Vec<Tensor>>,
    pub classifier: Option<Vec<Tensor>>,
    /// For guidance steps with γ > 0: the classification part of the encoder
    /// gradient before scaling by γ.
    pub guidance: Option<Vec<Tensor>>,
    pub report: StepReport,
}

fn finite(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.to_string() })
    }
}

fn chunk_gradients(models: &Models, batch: &Batch, kind: StepKind, s: &StepSettings) -> Result<BatchGradients> {
    let tape = Tape::new();
    let enc_params = models.encoder.params.bind(&tape, kind != StepKind::Classifier);
    let g0 = tape.constant(batch.g0.clone());
    let enc = models.encoder.forward(&enc_params, &batch.images, &g0)?;
    let mut report = StepReport {
        l_pix: f64::NAN,
        l_perc: f64::NAN,
        l_cls: f64::NAN,
        total: 0.0,
        correct: 0,
        count: 0,
    };

    let rec = if kind == StepKind::Classifier {
        None
    } else {
        let decoded = decode_var(&enc.raw, models.bound()?)?;
        let img = render_var(&decoded, &models.render_target()?)?;
        let rec = reconstruction_loss(&img, &batch.images, s.lambda_perc(), s.variant)?;
        report.l_pix = finite("l_pix", rec.pixel.item())?;
        if let Some(p) = rec.perceptual {
            report.l_perc = finite("l_perc", p.item())?;
        }
        report.total = finite("reconstruction loss", rec.total.item())?;
        Some(rec.total)
    };

    let cls_needed = kind != StepKind::Reconstruction;
    let cls_params = models.classifier.params.bind(&tape, matches!(kind, StepKind::Classifier | StepKind::Joint));
    let ce = if cls_needed {
        let out = models.classifier.forward(&cls_params, &enc.raw)?;
        let ce = cross_entropy(&out.logits, &batch.labels)?;
        report.l_cls = finite("l_cls", ce.item())?;
        let preds = argmax_rows(&out.logits.value());
        report.correct = preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        report.count = batch.len();
        Some(ce)
    } else {
        None
    };

    let mut out = BatchGradients {
        encoder: None,
        classifier: None,
        guidance: None,
        report,
    };
    match kind {
        StepKind::Reconstruction => {
            out.encoder = Some(enc_params.gradients(&rec.expect("reconstruction loss"))?);
        }
        StepKind::Classifier => {
            let ce = ce.expect("classification loss");
            out.report.total = out.report.l_cls;
            out.classifier = Some(cls_params.gradients(&ce)?);
        }
        StepKind::Joint => {
            let ce = ce.expect("classification loss");
            let total = rec.expect("reconstruction loss").add(&ce.scale(s.weights.lambda_cls))?;
            out.report.total = finite("total loss", total.item())?;
            let wrt: Vec<_> = enc_params.vars().iter().chain(cls_params.vars()).copied().collect();
            let mut grads = tape.gradients(&total, &wrt)?;
            let cls = grads.split_off(enc_params.vars().len());
            out.encoder = Some(grads);
            out.classifier = Some(cls);
        }
        StepKind::Guidance => {
            let mut grads = enc_params.gradients(&rec.expect("reconstruction loss"))?;
            if s.weights.gamma > 0.0 {
                let cls = enc_params.gradients(&ce.expect("classification loss"))?;
                accumulate(&mut grads, &cls, s.weights.gamma);
                out.guidance = Some(cls);
            }
            out.encoder = Some(grads);
        }
    }
    Ok(out)
}

fn add_scaled(acc: &mut Option<Vec<Tensor>>, grads: Option<Vec<Tensor>>, w: f64) {
    if let Some(g) = grads {
        match acc {
            Some(a) => accumulate(a, &g, w),
            None => {
                let mut zeros: Vec<Tensor> = g.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
                accumulate(&mut zeros, &g, w);
                *acc = Some(zeros);
            }
        }
    }
}

/// Batch-mean gradients for `kind`, computed chunk by chunk.
pub fn batch_gradients(models: &Models, batch: &Batch, kind: StepKind, s: &StepSettings) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    if kind == StepKind::Guidance {
        s.weights.validated()?;
    }
    let n = batch.len();
    let chunk = s.chunk_size.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<BatchGradients>> = starts
        .par_iter()
        .map(|&start| {
            let len = chunk.min(n - start);
            chunk_gradients(models, &batch.chunk(start, len)?, kind, s)
        })
        .collect();
    let mut out = BatchGradients {
        encoder: None,
        classifier: None,
        guidance: None,
        report: StepReport::empty(),
    };
    for (part, &start) in parts.into_iter().zip(&starts) {
        let part = part?;
        let w = chunk.min(n - start) as f64 / n as f64;
        add_scaled(&mut out.encoder, part.encoder, w);
        add_scaled(&mut out.classifier, part.classifier, w);
        add_scaled(&mut out.guidance, part.guidance, w);
        out.report.add_weighted(&part.report, w);
    }
    Ok(out)
}

/// Encoder update on the reconstruction loss.
pub fn reconstruction_step(models: &mut Models, enc_opt: &mut OptimizerState, batch: &Batch, s: &StepSettings) -> Result<StepReport> {
    let g = batch_gradients(models, batch, StepKind::Reconstruction, s)?;
    adamw_step(&mut models.encoder.params, &g.encoder.expect("encoder gradients"), enc_opt, s.lr, &s.optimizer)?;
    Ok(g.report)
}

/// Classifier update with the encoder frozen.
pub fn classifier_step(models: &mut Models, cls_opt: &mut OptimizerState, batch: &Batch, s: &StepSettings) -> Result<StepReport> {
    let g = batch_gradients(models, batch, StepKind::Classifier, s)?;
    adamw_step(&mut models.classifier.params, &g.classifier.expect("classifier gradients"), cls_opt, s.lr, &s.optimizer)?;
    Ok(g.report)
}

/// One backward through classifier, renderer and encoder on
/// `L_pix + λ_perc·L_perc + λ_cls·L_cls`; both optimizers step.
pub fn train_step_joint(
    models: &mut Models,
    enc_opt: &mut OptimizerState,
    cls_opt: &mut OptimizerState,
    batch: &Batch,
    s: &StepSettings,
) -> Result<StepReport> {
    let g = batch_gradients(models, batch, StepKind::Joint, s)?;
    adamw_step(&mut models.encoder.params, &g.encoder.expect("encoder gradients"), enc_opt, s.lr, &s.optimizer)?;
    adamw_step(&mut models.classifier.params, &g.classifier.expect("classifier gradients"), cls_opt, s.lr, &s.optimizer)?;
    Ok(g.report)
}

/// Encoder update along `∇(L_pix + λ_perc·L_perc) + γ·∇L_cls` with the
/// classifier held constant. With γ = 0 this is exactly a reconstruction step.
pub fn guidance_step(models: &mut Models, enc_opt: &mut OptimizerState, batch: &Batch, s: &StepSettings) -> Result<StepReport> {
    let g = batch_gradients(models, batch, StepKind::Guidance, s)?;
    adamw_step(&mut models.encoder.params, &g.encoder.expect("encoder gradients"), enc_opt, s.lr, &s.optimizer)?;
    Ok(g.report)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub l_pix: f64,
    pub l_perc: f64,
    pub l_cls: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub mean_det_sigma: f64,
    /// Learning rate of the last step.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,l_pix,l_perc,l_cls,train_acc,val_acc,mean_det_sigma,lr";

fn csv_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

impl EpochMetrics {
    /// Comma-separated row matching [`METRICS_HEADER`]; NaN fields are empty.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.phase,
            csv_num(self.l_pix),
            csv_num(self.l_perc),
            csv_num(self.l_cls),
            csv_num(self.train_acc),
            csv_num(self.val_acc),
            csv_num(self.mean_det_sigma),
            csv_num(self.lr)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Classify the encoder's Gaussians directly.
    #[default]
    Gaussians,
    /// Render the Gaussians, re-encode the rendering, then classify.
    Rendered,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(EvalMode::Gaussians),
            "rendered" => Ok(EvalMode::Rendered),
            other => Err(Error::validation(format!(
                "unknown evaluation mode {other:?}; expected gaussians or rendered"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Mean over all Gaussians of `det Σ = s₁²s₂²`.
    pub mean_det_sigma: f64,
    pub predictions: Vec<usize>,
}

/// Encoder output for every dataset item with its evaluation `g0`.
pub fn encode_dataset(models: &Models, data: &Dataset, seed: u64) -> Result<Vec<RawGaussianBatch>> {
    let k = models.config().k;
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Result<Vec<RawGaussianBatch>>> = idx
        .par_chunks(DEFAULT_CHUNK)
        .map(|ids| {
            let (images, _) = data.batch(ids)?;
            let g0 = Tensor::stack(&ids.iter().map(|&i| eval_g0(seed, i, k)).collect::<Vec<_>>())?
                .reshape([ids.len(), k, PARAMS_PER_GAUSSIAN])?;
            Ok(models.encoder.infer(&images, &g0)?.raw_gaussians)
        })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn det_sigma(raw: &RawGaussianBatch, bound: ScaleBound) -> Result<f64> {
    let d = decode(raw, bound)?;
    Ok((0..d.len())
        .map(|i| {
            let [s1, s2] = d.scales(i);
            (s1 * s2).powi(2)
        })
        .sum())
}

/// Classification accuracy on `data`; `g0` for item `i` comes from
/// [`eval_g0`]`(seed, i)` so repeated evaluations agree.
pub fn evaluate(models: &Models, data: &Dataset, mode: EvalMode, seed: u64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let cfg = models.config();
    let (k, s) = (cfg.k, cfg.image_size);
    let bound = models.bound()?;
    let target = models.render_target()?;
    let mut gaussians = encode_dataset(models, data, seed)?;
    let det_total = gaussians.iter().map(|g| det_sigma(g, bound)).sum::<Result<f64>>()?;
    if mode == EvalMode::Rendered {
        let idx: Vec<usize> = (0..data.len()).collect();
        let rendered: Vec<Result<Vec<RawGaussianBatch>>> = idx
            .par_chunks(DEFAULT_CHUNK)
            .map(|ids| {
                let imgs = ids
                    .iter()
                    .map(|&i| Ok(render(&decode(&gaussians[i], bound)?, &target)?.image))
                    .collect::<Result<Vec<_>>>()?;
                let images = Tensor::stack(&imgs)?.reshape([ids.len(), s, s, 3])?;
                let g0 = Tensor::stack(&ids.iter().map(|&i| eval_g0(seed, i, k)).collect::<Vec<_>>())?
                    .reshape([ids.len(), k, PARAMS_PER_GAUSSIAN])?;
                Ok(models.encoder.infer(&images, &g0)?.raw_gaussians)
            })
            .collect();
        let mut again = Vec::with_capacity(data.len());
        for r in rendered {
            again.extend(r?);
        }
        gaussians = again;
    }
    let mut predictions = Vec::with_capacity(data.len());
    for group in gaussians.chunks(64) {
        let stacked = Tensor::stack(&group.iter().map(|g| g.params().clone()).collect::<Vec<_>>())?;
        predictions.extend(argmax_rows(&models.classifier.infer(&stacked)?));
    }
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        mean_det_sigma: det_total / (data.len() * k) as f64,
        predictions,
    })
}

/// Staged training state, resumable at epoch boundaries.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    pub encoder_opt: OptimizerState,
    pub classifier_opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed regular steps; guidance steps share the index of the step
    /// they follow.
    pub global_step: u64,
    /// Loss of every regular step run by this value, in order.
    pub step_losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::new(model, config.seed)?;
        Ok(Trainer::from_parts(config, models))
    }

    pub fn from_parts(config: TrainConfig, models: Models) -> Self {
        Trainer {
            encoder_opt: OptimizerState::new(&models.encoder.params),
            classifier_opt: OptimizerState::new(&models.classifier.params),
            config,
            models,
            epoch: 0,
            global_step: 0,
            step_losses: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    fn settings(&self, phase: Phase, lr: f64) -> StepSettings {
        StepSettings {
            weights: self.config.weights,
            variant: self.config.variant,
            perceptual: phase != Phase::EncoderWarmup,
            lr,
            optimizer: self.config.optimizer,
            chunk_size: self.config.chunk_size,
        }
    }

    fn lr_at(&self, phase: Phase, epoch: usize, step_in_epoch: usize, spe: usize) -> f64 {
        let (start, len) = self.config.stage_span(phase);
        let total = (len * spe) as u64;
        let warmup = ((self.config.warmup_epochs * spe) as u64).min(total / 2);
        let step = ((epoch - start) * spe + step_in_epoch) as u64;
        lr_schedule(step, total, warmup, self.config.base_lr, self.config.batch_size)
    }

    fn make_batch(&self, train: &Dataset, ids: &[usize]) -> Result<Batch> {
        let c = &self.config;
        let (mut images, labels) = train.batch(ids)?;
        if !c.augment.is_identity() {
            let mut rng = stream(c.seed, purpose::AUGMENT, self.global_step);
            let s = train.image_size;
            let aug: Vec<Tensor> = ids
                .iter()
                .map(|&i| augment_image(&train.images[i], c.augment, &mut rng))
                .collect();
            images = Tensor::stack(&aug)?.reshape([ids.len(), s, s, 3])?;
        }
        let g0 = sample_g0(ids.len(), self.models.config().k, c.seed, purpose::G0, self.global_step);
        Ok(Batch { images, labels, g0 })
    }

    /// Runs the next epoch; `val` adds validation accuracy and mean det(Σ).
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        let epoch = self.epoch;
        let phase = self
            .config
            .phase_of(epoch)
            .ok_or_else(|| Error::validation("training schedule already finished"))?;
        let spe = self.steps_per_epoch(train.len());
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, purpose::SHUFFLE, epoch as u64));

        let mut sum = StepReport::empty();
        let mut lr = 0.0;
        let phase_start = self.config.first_epoch_of(phase);
        for (j, ids) in order.chunks(self.config.batch_size).enumerate() {
            lr = self.lr_at(phase, epoch, j, spe);
            let s = self.settings(phase, lr);
            let batch = self.make_batch(train, ids)?;
            let m = &mut self.models;
            let report = match phase {
                Phase::EncoderWarmup | Phase::Perceptual => reconstruction_step(m, &mut self.encoder_opt, &batch, &s)?,
                Phase::ClassifierPretrain => classifier_step(m, &mut self.classifier_opt, &batch, &s)?,
                Phase::Joint | Phase::Guidance => {
                    let r = train_step_joint(m, &mut self.encoder_opt, &mut self.classifier_opt, &batch, &s)?;
                    let phase_step = (epoch - phase_start) * spe + j;
                    let due = (phase_step + 1) % self.config.guidance_every == 0;
                    if phase == Phase::Guidance && due && s.weights.gamma > 0.0 {
                        guidance_step(m, &mut self.encoder_opt, &batch, &s)?;
                    }
                    r
                }
            };
            self.step_losses.push(report.total);
            sum.add_weighted(&report, batch.len() as f64 / train.len() as f64);
            self.global_step += 1;
        }

        let (val_acc, mean_det_sigma) = match val {
            Some(v) if !v.is_empty() => {
                let r = evaluate(&self.models, v, EvalMode::Gaussians, self.config.seed)?;
                (r.accuracy, r.mean_det_sigma)
            }
            _ => (f64::NAN, f64::NAN),
        };
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch,
            phase,
            l_pix: sum.l_pix,
            l_perc: sum.l_perc,
            l_cls: sum.l_cls,
            train_acc: if sum.count > 0 {
                sum.correct as f64 / sum.count as f64
            } else {
                f64::NAN
            },
            val_acc,
            mean_det_sigma,
            lr,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run<F>(&mut self, train: &Dataset, val: Option<&Dataset>, mut on_epoch: F) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    {
        let mut log = Vec::new();
        while !self.is_finished() {
            let m = self.run_epoch(train, val)?;
            on_epoch(self, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Trains fresh models through every phase.
pub fn run_schedule(
    model: ModelConfig,
    config: TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<(Trainer, Vec<EpochMetrics>)> {
    if train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let mut trainer = Trainer::new(model, config)?;
    let log = trainer.run(train, val, |_, _| Ok(()))?;
    Ok((trainer, log))
}
