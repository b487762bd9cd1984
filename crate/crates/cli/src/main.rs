use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gvit_cli::commands::{self, FitArgs, RenderOutputs, Split, TrainArgs};
use gvit_cli::config::KEYS;
use gvit_cli::{init_threads, Result};
use gvit_core::data::ShapesConfig;
use gvit_core::losses::ReconstructionVariant;
use gvit_core::training::{EvalMode, FitInit};

#[derive(Parser)]
#[command(name = "gvit", version, about = "Gaussian-token vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit k Gaussians to one image by gradient descent.
    Fit {
        image: PathBuf,
        #[arg(long, default_value_t = 256)]
        k: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Output prefix for `<out>.gauss` and `<out>.png`.
        #[arg(long)]
        out: PathBuf,
        /// Square side the image is resized to.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "mse")]
        loss: ReconstructionVariant,
        /// Weight of the DSSIM term for the +dssim losses.
        #[arg(long, default_value_t = 0.0)]
        lambda_perc: f64,
        /// Initialize colors by k-means instead of at random.
        #[arg(long)]
        kmeans: bool,
    },
    /// Run the staged training schedule from a config file.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// With --resume, draw fresh classifier weights and keep the encoder.
        #[arg(long, requires = "resume")]
        reinit_classifier: bool,
        /// Stop after this many epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides out_dir from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        /// Config whose dataset replaces the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// gaussians, or rendered to re-encode the rasterized Gaussians first.
        #[arg(long, default_value = "gaussians")]
        on: EvalMode,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Reconstruction, 2σ ellipses, det map and CDAM for one image.
    Render {
        checkpoint: PathBuf,
        image: PathBuf,
        out_prefix: PathBuf,
        #[arg(long, default_value_t = 8)]
        upscale: usize,
    },
    /// Only the det map and CDAM outputs of `render`.
    Explain {
        checkpoint: PathBuf,
        image: PathBuf,
        out_prefix: PathBuf,
        #[arg(long, default_value_t = 8)]
        upscale: usize,
    },
    /// Write a synthetic shapes dataset as PNG files and labels.csv.
    DatasetGen {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List every config key.
    Keys,
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Fit {
            image,
            k,
            steps,
            out,
            size,
            lr,
            seed,
            loss,
            lambda_perc,
            kmeans,
        } => {
            let mut args = FitArgs::new(image, k, steps, out.clone());
            args.size = size;
            args.options.lr = lr;
            args.options.seed = seed;
            args.options.variant = loss;
            args.options.lambda_perc = lambda_perc;
            args.options.init = if kmeans { FitInit::KMeans } else { FitInit::Random };
            let s = commands::fit(&args)?;
            println!(
                "mse {:.6} -> {:.6}, psnr {:.2} dB; wrote {}.gauss and {}.png",
                s.result.initial_mse,
                s.result.final_mse,
                s.psnr,
                out.display(),
                out.display()
            );
        }
        Command::Train {
            config,
            resume,
            reinit_classifier,
            epochs,
            out_dir,
        } => {
            let args = TrainArgs {
                config,
                resume,
                reinit_classifier,
                max_epochs: epochs,
                out_dir,
            };
            let outcome = commands::train(&args, |m| {
                eprintln!(
                    "epoch {:>4} {:<20} l_pix {:.5} l_cls {:.4} train {:.3} val {:.3} lr {:.2e}",
                    m.epoch, m.phase, m.l_pix, m.l_cls, m.train_acc, m.val_acc, m.lr
                )
            })?;
            println!(
                "trained to epoch {}; checkpoint {}",
                outcome.trainer.epoch,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            on,
            split,
        } => {
            let r = commands::eval(&checkpoint, config.as_deref(), split, on)?;
            let mode = match on {
                EvalMode::Gaussians => "gaussians",
                EvalMode::Rendered => "rendered",
            };
            println!(
                "top-1 {:.4} ({}/{}) on {mode}; mean det(Sigma) {:.6e}",
                r.accuracy, r.correct, r.total, r.mean_det_sigma
            );
        }
        Command::Render {
            checkpoint,
            image,
            out_prefix,
            upscale,
        } => report(commands::render_image(&checkpoint, &image, &out_prefix, upscale, RenderOutputs::All)?),
        Command::Explain {
            checkpoint,
            image,
            out_prefix,
            upscale,
        } => report(commands::render_image(
            &checkpoint,
            &image,
            &out_prefix,
            upscale,
            RenderOutputs::Saliency,
        )?),
        Command::DatasetGen {
            out_dir,
            classes,
            count,
            size,
            seed,
        } => {
            let cfg = ShapesConfig {
                num_classes: classes,
                count,
                image_size: size,
                seed,
            };
            let ds = commands::dataset_gen(cfg, &out_dir)?;
            println!("wrote {} images to {}", ds.len(), out_dir.display());
        }
        Command::Keys => {
            for (key, doc) in KEYS {
                println!("{key:<28} {doc}");
            }
        }
    }
    Ok(())
}

fn report(s: commands::RenderSummary) {
    println!("predicted class {}", s.predicted);
    for f in &s.files {
        println!("wrote {}", f.display());
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
