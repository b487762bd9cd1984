use std::path::{Path, PathBuf};
use std::process::Command;

use gvit_cli::commands::{self, FitArgs, RenderOutputs, Split, TrainArgs};
use gvit_cli::config::RunConfig;
use gvit_cli::{checkpoint, datasets, dump};
use gvit_core::data::ShapesConfig;
use gvit_core::training::EvalMode;
use tempfile::TempDir;

const TINY: &str = "\
k = 4
num_classes = 3
image_size = 16
patch_size = 8
encoder_width = 16
encoder_heads = 2
encoder_depth = 1
encoder_mlp = 32
classifier_width = 16
classifier_heads = 2
classifier_depth = 1
classifier_mlp = 32
batch_size = 4
base_lr = 0.05
warmup_epochs = 0
epochs_warmup_encoder = 1
epochs_perc_on = 1
epochs_classifier_pretrain = 1
epochs_classifier_joint = 1
epochs_guidance = 1
guidance_every = 2
shapes_count = 20
val_count = 4
seed = 3
";

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let out = dir.join(format!("{name}.out"));
    std::fs::write(&path, format!("{TINY}{extra}\nout_dir = {}\n", out.display())).unwrap();
    path
}

fn train(config: &Path, resume: Option<PathBuf>, max_epochs: Option<usize>) -> commands::TrainOutcome {
    let args = TrainArgs {
        config: config.to_path_buf(),
        resume,
        max_epochs,
        ..TrainArgs::default()
    };
    commands::train(&args, |_| {}).unwrap()
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    let out = train(&cfg, None, None);
    assert_eq!(out.metrics.len(), 5);
    let csv = std::fs::read_to_string(out.config.out_dir.join(commands::METRICS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("epoch,phase"));
    assert!(lines[5].starts_with("4,guidance,"));
    let (saved, t) = checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(saved, out.config);
    assert_eq!(t.epoch, 5);
    assert_eq!(t.models.encoder.params, out.trainer.models.encoder.params);
}

#[test]
fn resumed_run_continues_the_uninterrupted_one() {
    let dir = TempDir::new().unwrap();
    let full = train(&write_config(dir.path(), "full.cfg", ""), None, Some(3));

    let cfg = write_config(dir.path(), "split.cfg", "");
    let first = train(&cfg, None, Some(2));
    let resumed = train(&cfg, Some(first.checkpoint.clone()), Some(1));

    let uninterrupted = &full.trainer.step_losses;
    let continued = &resumed.trainer.step_losses;
    let spe = uninterrupted.len() / 3;
    assert_eq!(continued.len(), spe);
    for (a, b) in continued.iter().zip(&uninterrupted[2 * spe..]) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
    assert_eq!(full.trainer.models.encoder.params, resumed.trainer.models.encoder.params);
    assert_eq!(full.trainer.classifier_opt, resumed.trainer.classifier_opt);
    let csv = std::fs::read_to_string(cfg.with_extension("cfg.out").join(commands::METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn reinitialized_classifier_keeps_the_encoder() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(dir.path(), "run.cfg", "");
    let first = train(&cfg_path, None, Some(3));
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let t = commands::prepare_trainer(&cfg, Some(&first.checkpoint), true).unwrap();
    assert_eq!(t.models.encoder.params, first.trainer.models.encoder.params);
    assert_ne!(t.models.classifier.params, first.trainer.models.classifier.params);
    assert_eq!(t.classifier_opt.step, 0);
    assert_eq!(t.epoch, 3);

    let other = write_config(dir.path(), "other.cfg", "").with_file_name("k8.cfg");
    std::fs::write(&other, TINY.replace("k = 4", "k = 8")).unwrap();
    let cfg8 = RunConfig::load(&other).unwrap();
    assert!(commands::prepare_trainer(&cfg8, Some(&first.checkpoint), false).is_err());
}

#[test]
fn eval_modes_and_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "");
    let out = train(&cfg, None, None);
    let g = commands::eval(&out.checkpoint, None, Split::Val, EvalMode::Gaussians).unwrap();
    let r = commands::eval(&out.checkpoint, None, Split::Val, EvalMode::Rendered).unwrap();
    assert_eq!((g.total, r.total), (4, 4));
    let last = out.metrics.last().unwrap();
    assert_eq!(g.accuracy, last.val_acc);
    assert_eq!(commands::eval(&out.checkpoint, None, Split::All, EvalMode::Gaussians).unwrap().total, 20);

    let k8 = dir.path().join("k8.cfg");
    std::fs::write(&k8, TINY.replace("k = 4", "k = 8")).unwrap();
    let err = commands::eval(&out.checkpoint, Some(&k8), Split::Val, EvalMode::Gaussians).unwrap_err();
    assert!(err.to_string().contains("k mismatch"), "{err}");

    let no_val = dir.path().join("noval.cfg");
    std::fs::write(&no_val, TINY.replace("val_count = 4", "val_count = 0")).unwrap();
    let err = commands::eval(&out.checkpoint, Some(&no_val), Split::Val, EvalMode::Gaussians).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn render_and_explain_outputs() {
    let dir = TempDir::new().unwrap();
    let out = train(&write_config(dir.path(), "run.cfg", ""), None, Some(1));
    let data = dir.path().join("data");
    commands::dataset_gen(
        ShapesConfig {
            num_classes: 3,
            count: 3,
            image_size: 16,
            seed: 1,
        },
        &data,
    )
    .unwrap();
    let image = data.join("00000.png");
    let prefix = dir.path().join("viz");
    let s = commands::render_image(&out.checkpoint, &image, &prefix, 4, RenderOutputs::All).unwrap();
    assert_eq!(s.ellipses, 4);
    assert_eq!(s.files.len(), 5);
    let dims = |suffix: &str| image::image_dimensions(dir.path().join(format!("viz{suffix}"))).unwrap();
    assert_eq!(dims("_recon.png"), (64, 64));
    assert_eq!(dims("_ellipses.png"), (64, 64));
    assert_eq!(dims("_det.png"), (64, 64));
    assert_eq!(dims("_cdam.png"), (64, 64));
    let csv = std::fs::read_to_string(dir.path().join("viz_gaussians.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let prefix = dir.path().join("sal");
    let s = commands::render_image(&out.checkpoint, &image, &prefix, 2, RenderOutputs::Saliency).unwrap();
    assert_eq!(s.files.len(), 3);
    assert_eq!(image::image_dimensions(dir.path().join("sal_det.png")).unwrap(), (32, 32));
    assert!(!dir.path().join("sal_recon.png").exists());
}

#[test]
fn generated_datasets_load_back() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("shapes");
    let ds = commands::dataset_gen(
        ShapesConfig {
            num_classes: 3,
            count: 9,
            image_size: 16,
            seed: 4,
        },
        &data,
    )
    .unwrap();
    let text = format!("{TINY}dataset = image-dir\ndata_path = {}\n", data.display());
    let cfg = RunConfig::parse(&text).unwrap();
    let loaded = datasets::load_dataset(&cfg).unwrap();
    assert_eq!(loaded.labels, ds.labels);
    assert_eq!(loaded.class_names, ds.class_names);
    for (a, b) in loaded.images.iter().zip(&ds.images) {
        assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
    }
    let (t1, v1) = datasets::load_split(&cfg).unwrap();
    let (t2, v2) = datasets::load_split(&cfg).unwrap();
    assert_eq!((t1, v1), (t2, v2));

    std::fs::write(data.join("00003.png"), b"not a png").unwrap();
    let err = datasets::load_dataset(&cfg).unwrap_err();
    assert!(err.to_string().contains("00003.png"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn fit_writes_dump_and_comparison() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    commands::dataset_gen(
        ShapesConfig {
            num_classes: 2,
            count: 1,
            image_size: 32,
            seed: 0,
        },
        &data,
    )
    .unwrap();
    let mut args = FitArgs::new(data.join("00000.png"), 16, 150, dir.path().join("fit"));
    args.size = 32;
    let s = commands::fit(&args).unwrap();
    assert!(s.result.final_mse < s.result.initial_mse);
    let g = dump::read(&dir.path().join("fit.gauss")).unwrap();
    assert_eq!(g.len(), 16);
    assert_eq!(g.params(), s.gaussians.params());
    assert_eq!(image::image_dimensions(dir.path().join("fit.png")).unwrap(), (64, 32));

    args.k = 0;
    assert!(commands::fit(&args).is_err());
    args.k = 2;
    args.image = dir.path().join("missing.png");
    assert_eq!(commands::fit(&args).unwrap_err().exit_code(), 2);
}

fn gvit(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_gvit"))
        .args(args)
        .env("GVIT_THREADS", "1")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let (code, text) = gvit(&["keys"]);
    assert_eq!(code, 0);
    assert!(text.contains("guidance_every"));

    let missing = dir.path().join("nope.cfg");
    let (code, text) = gvit(&["train", missing.to_str().unwrap()]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("nope.cfg"));

    let typo = dir.path().join("typo.cfg");
    std::fs::write(&typo, "k = 4\nguidance_evry = 3\n").unwrap();
    let (code, text) = gvit(&["train", typo.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(text.contains("line 2") && text.contains("guidance_every"), "{text}");

    let greedy = dir.path().join("gamma.cfg");
    std::fs::write(&greedy, "gamma = 0.2\n").unwrap();
    let (code, text) = gvit(&["train", greedy.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(text.contains("gamma"), "{text}");

    let (code, _) = gvit(&["eval", "x.bin", "--on", "pixels"]);
    assert_eq!(code, 1);

    let cfg = dir.path().join("run.cfg");
    let short = TINY
        .replace("epochs_classifier_joint = 1", "epochs_classifier_joint = 0")
        .replace("epochs_guidance = 1", "epochs_guidance = 0");
    std::fs::write(&cfg, format!("{short}out_dir = {}\n", cfg.with_extension("cfg.out").display())).unwrap();
    let (code, text) = gvit(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    let ckpt = cfg.with_extension("cfg.out").join(commands::CHECKPOINT_FILE);
    let (code, text) = gvit(&["eval", ckpt.to_str().unwrap(), "--on", "rendered"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("on rendered"));
}
