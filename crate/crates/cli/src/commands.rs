use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gvit_core::data::{synthetic_shapes, Dataset, ShapesConfig};
use gvit_core::gaussian::{decode, DecodedGaussianBatch, ScaleBound};
use gvit_core::interpret::{cdam, det_sigma_map, gaussian_csv, heatmap_image, CdamSource};
use gvit_core::losses::psnr;
use gvit_core::models::argmax_rows;
use gvit_core::raster::{render, RenderTarget};
use gvit_core::training::{
    eval_g0, evaluate, fit_image_sgd, EpochMetrics, EvalMode, EvalReport, FitInit, FitOptions, FitResult, OptimizerState,
    Trainer, METRICS_HEADER,
};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::datasets::{load_dataset, load_split, write_image_dir};
use crate::dump;
use crate::error::{CliError, Result};
use crate::imageio::{draw_ellipses, load_image, save_rgb, side_by_side, tensor_to_rgb, upscale};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub image: PathBuf,
    pub k: usize,
    pub steps: usize,
    /// Output prefix: writes `<out>.gauss` and `<out>.png`.
    pub out: PathBuf,
    /// Side of the square the image is resized to.
    pub size: usize,
    pub options: FitOptions,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub result: FitResult,
    pub psnr: f64,
    pub gaussians: DecodedGaussianBatch,
}

pub fn fit(args: &FitArgs) -> Result<FitSummary> {
    if args.k == 0 {
        return Err(CliError::validation("k must be at least 1"));
    }
    let image = load_image(&args.image, args.size)?;
    let result = fit_image_sgd(&image, args.k, args.steps, args.options)?;
    let bound = ScaleBound::new(args.options.scale_bound)?;
    let gaussians = decode(&result.raw, bound)?;
    let rendered = render(&gaussians, &RenderTarget::new(args.size, args.size)?)?.image;
    dump::write(&with_suffix(&args.out, ".gauss"), &gaussians)?;
    let pair = side_by_side(&tensor_to_rgb(&image), &tensor_to_rgb(&rendered));
    save_rgb(&pair, &with_suffix(&args.out, ".png"))?;
    Ok(FitSummary {
        psnr: psnr(result.final_mse),
        result,
        gaussians,
    })
}

impl FitArgs {
    pub fn new(image: PathBuf, k: usize, steps: usize, out: PathBuf) -> Self {
        FitArgs {
            image,
            k,
            steps,
            out,
            size: 64,
            options: FitOptions {
                init: FitInit::Random,
                ..FitOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Continue from this checkpoint instead of fresh weights.
    pub resume: Option<PathBuf>,
    /// Draw new classifier weights (and reset its optimizer) after loading.
    pub reinit_classifier: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<usize>,
    /// Overrides `out_dir` from the config.
    pub out_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub config: RunConfig,
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Builds a trainer for `cfg`, optionally from a checkpoint whose model must
/// match.
pub fn prepare_trainer(cfg: &RunConfig, resume: Option<&Path>, reinit_classifier: bool) -> Result<Trainer> {
    let mut trainer = match resume {
        None => {
            let mut t = Trainer::new(cfg.model, cfg.train.clone())?;
            t.models.render_mode = cfg.render_mode;
            t
        }
        Some(path) => {
            let (saved, mut t) = checkpoint::load(path)?;
            if saved.model != cfg.model {
                return Err(CliError::validation(format!(
                    "checkpoint {} was trained with a different model configuration (k = {} vs {})",
                    path.display(),
                    saved.model.k,
                    cfg.model.k
                )));
            }
            cfg.train.validate()?;
            t.config = cfg.train.clone();
            t.models.render_mode = cfg.render_mode;
            t
        }
    };
    if reinit_classifier {
        trainer.models.classifier.reinitialize(cfg.train.seed.wrapping_add(1))?;
        trainer.classifier_opt = OptimizerState::new(&trainer.models.classifier.params);
    }
    Ok(trainer)
}

/// Runs the schedule, saving a checkpoint and appending a metrics row after
/// every epoch.
pub fn train<F>(args: &TrainArgs, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics),
{
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    let (train, val) = load_split(&cfg)?;
    if train.is_empty() {
        return Err(CliError::validation("training split is empty"));
    }
    let mut trainer = prepare_trainer(&cfg, args.resume.as_deref(), args.reinit_classifier)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let fresh = args.resume.is_none() || !metrics_path.exists();
    let mut metrics_file = open_metrics(&metrics_path, fresh)?;
    if fresh {
        writeln!(metrics_file, "{METRICS_HEADER}").map_err(|e| CliError::io(&metrics_path, e))?;
    }

    let val = (!val.is_empty()).then_some(&val);
    let mut metrics = Vec::new();
    let budget = args.max_epochs.unwrap_or(usize::MAX);
    while !trainer.is_finished() && metrics.len() < budget {
        let m = trainer.run_epoch(&train, val)?;
        writeln!(metrics_file, "{}", m.csv_row()).map_err(|e| CliError::io(&metrics_path, e))?;
        checkpoint::save(&ckpt, &cfg, &trainer)?;
        on_epoch(&m);
        metrics.push(m);
    }
    if metrics.is_empty() {
        checkpoint::save(&ckpt, &cfg, &trainer)?;
    }
    Ok(TrainOutcome {
        config: cfg,
        trainer,
        metrics,
        checkpoint: ckpt,
    })
}

fn open_metrics(path: &Path, fresh: bool) -> Result<std::fs::File> {
    let mut o = OpenOptions::new();
    if fresh {
        o.write(true).create(true).truncate(true);
    } else {
        o.append(true);
    }
    o.open(path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    Train,
    #[default]
    Val,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            _ => Err("expected train, val or all".into()),
        }
    }
}

fn pick_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let ds = load_dataset(cfg)?;
    if split == Split::All {
        return Ok(ds);
    }
    let (train, val) = ds.split(cfg.data.val_count, cfg.data.split_seed)?;
    Ok(if split == Split::Train { train } else { val })
}

/// Loads a checkpoint and, if given, a config whose dataset replaces the
/// checkpoint's. The config's model must agree with the checkpoint.
pub fn load_for_eval(checkpoint_path: &Path, config: Option<&Path>) -> Result<(RunConfig, Trainer)> {
    let (saved, trainer) = checkpoint::load(checkpoint_path)?;
    let cfg = match config {
        None => saved,
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            if cfg.model.k != saved.model.k {
                return Err(CliError::validation(format!(
                    "k mismatch: checkpoint has k = {}, config has k = {}",
                    saved.model.k, cfg.model.k
                )));
            }
            if cfg.model != saved.model {
                return Err(CliError::validation("model configuration differs from the checkpoint"));
            }
            cfg
        }
    };
    Ok((cfg, trainer))
}

pub fn eval(checkpoint_path: &Path, config: Option<&Path>, split: Split, mode: EvalMode) -> Result<EvalReport> {
    let (cfg, trainer) = load_for_eval(checkpoint_path, config)?;
    let data = pick_split(&cfg, split)?;
    if data.is_empty() {
        return Err(CliError::validation("selected split is empty"));
    }
    Ok(evaluate(&trainer.models, &data, mode, cfg.train.seed)?)
}

#[derive(Debug, Clone)]
pub struct RenderSummary {
    pub predicted: usize,
    pub ellipses: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderOutputs {
    /// Reconstruction, ellipse overlay, det map, CDAM and the per-Gaussian CSV.
    All,
    /// Only the saliency maps and the CSV.
    Saliency,
}

/// Encodes one image and writes `<prefix>_recon.png`, `<prefix>_ellipses.png`,
/// `<prefix>_det.png`, `<prefix>_cdam.png` and `<prefix>_gaussians.csv`.
pub fn render_image(
    checkpoint_path: &Path,
    image: &Path,
    prefix: &Path,
    scale: usize,
    outputs: RenderOutputs,
) -> Result<RenderSummary> {
    let (cfg, trainer) = checkpoint::load(checkpoint_path)?;
    let models = &trainer.models;
    let (k, s) = (cfg.model.k, cfg.model.image_size);
    let scale = scale.max(1);
    let img = load_image(image, s)?;
    let batch = img.clone().reshape([1, s, s, 3])?;
    let raw = models
        .encoder
        .infer(&batch, &eval_g0(cfg.train.seed, 0, k))?
        .raw_gaussians
        .remove(0);
    let decoded = decode(&raw, models.bound()?)?;
    let logits = models.classifier.infer(&raw.params().clone().reshape([1, k, 9])?)?;
    let predicted = argmax_rows(&logits)[0];

    let mut files = Vec::new();
    let mut ellipses = 0;
    if outputs == RenderOutputs::All {
        let side = s * scale;
        let target = RenderTarget::new(side, side)?.with_mode(models.render_mode);
        let recon = tensor_to_rgb(&render(&decoded, &target)?.image);
        let path = with_suffix(prefix, "_recon.png");
        save_rgb(&recon, &path)?;
        files.push(path);

        let mut overlay = upscale(&tensor_to_rgb(&img), scale);
        ellipses = draw_ellipses(&mut overlay, &decoded)?;
        let path = with_suffix(prefix, "_ellipses.png");
        save_rgb(&overlay, &path)?;
        files.push(path);
    }

    let det = det_sigma_map(&decoded);
    let path = with_suffix(prefix, "_det.png");
    save_rgb(&heatmap_image(&det.map, scale), &path)?;
    files.push(path);

    let attribution = cdam(&raw, &models.classifier, predicted, CdamSource::default())?;
    let path = with_suffix(prefix, "_cdam.png");
    save_rgb(&heatmap_image(&attribution.map, scale), &path)?;
    files.push(path);

    let path = with_suffix(prefix, "_gaussians.csv");
    write_file(&path, &gaussian_csv(&decoded, Some(&attribution.scores)))?;
    files.push(path);

    Ok(RenderSummary {
        predicted,
        ellipses,
        files,
    })
}

/// Writes a synthetic shapes set as an `image-dir` dataset.
pub fn dataset_gen(config: ShapesConfig, dir: &Path) -> Result<Dataset> {
    let ds = synthetic_shapes(config)?;
    write_image_dir(&ds, dir)?;
    Ok(ds)
}
