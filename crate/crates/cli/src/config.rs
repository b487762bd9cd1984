//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. `preset`, `k` and
//! `num_classes` are applied first wherever they appear; every other key
//! overrides the preset in file order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gvit_core::losses::ReconstructionVariant;
use gvit_core::models::ModelConfig;
use gvit_core::raster::RenderMode;
use gvit_core::training::TrainConfig;

use crate::error::{CliError, Result};

/// Every accepted key with a one-line description, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "model preset: toy or small"),
    ("k", "Gaussians per image"),
    ("num_classes", "number of classes"),
    ("image_size", "square input side in pixels"),
    ("patch_size", "encoder patch side in pixels"),
    ("encoder_width", "encoder token width"),
    ("encoder_depth", "encoder transformer blocks"),
    ("encoder_heads", "encoder attention heads"),
    ("encoder_mlp", "encoder MLP hidden width"),
    ("classifier_width", "classifier token width"),
    ("classifier_depth", "classifier transformer blocks"),
    ("classifier_heads", "classifier attention heads"),
    ("classifier_mlp", "classifier MLP hidden width"),
    ("use_class_token", "classifier pools a learned class token (else mean pooling)"),
    ("classifier_positions", "learned position embedding on classifier tokens"),
    ("classifier_final_norm", "layer norm after the last classifier block"),
    ("scale_bound", "largest decoded Gaussian scale"),
    ("render_mode", "tiled or exact"),
    ("base_lr", "learning rate at batch size 256"),
    ("batch_size", "images per step"),
    ("epochs_warmup_encoder", "encoder epochs on the pixel loss"),
    ("epochs_perc_on", "encoder epochs with the perceptual term"),
    ("epochs_classifier_pretrain", "classifier epochs on a frozen encoder"),
    ("epochs_classifier_joint", "joint encoder and classifier epochs"),
    ("epochs_guidance", "joint epochs with interleaved guidance steps"),
    ("warmup_epochs", "linear learning-rate warmup per schedule"),
    ("beta1", "AdamW first-moment decay"),
    ("beta2", "AdamW second-moment decay"),
    ("eps", "AdamW epsilon"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("guidance_every", "steps between guidance steps"),
    ("lambda_perc", "weight of the DSSIM term"),
    ("lambda_cls", "weight of the classification loss"),
    ("gamma", "guidance strength, at most 0.1"),
    ("loss", "mse, bce, mse+dssim or bce+dssim"),
    ("hflip", "random horizontal flips"),
    ("crop", "random crops of 50-100% area"),
    ("seed", "run seed"),
    ("chunk_size", "images per gradient work item"),
    ("dataset", "shapes, image-dir, mnist or cifar"),
    ("data_path", "dataset root for file-backed datasets"),
    ("max_images", "read at most this many images from files, 0 for all"),
    ("shapes_count", "number of generated shapes images"),
    ("shapes_seed", "generator seed for shapes images"),
    ("val_count", "held-out validation images"),
    ("split_seed", "seed of the train/validation split"),
    ("out_dir", "directory for checkpoint and metrics"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Shapes,
    ImageDir,
    Mnist,
    Cifar,
}

impl DataFormat {
    pub fn name(self) -> &'static str {
        match self {
            DataFormat::Shapes => "shapes",
            DataFormat::ImageDir => "image-dir",
            DataFormat::Mnist => "mnist",
            DataFormat::Cifar => "cifar",
        }
    }
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shapes" => Ok(DataFormat::Shapes),
            "image-dir" => Ok(DataFormat::ImageDir),
            "mnist" => Ok(DataFormat::Mnist),
            "cifar" => Ok(DataFormat::Cifar),
            _ => Err("expected shapes, image-dir, mnist or cifar".into()),
        }
    }
}

/// Where images come from and how they are split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub format: DataFormat,
    pub path: Option<PathBuf>,
    pub max_images: usize,
    pub shapes_count: usize,
    pub shapes_seed: u64,
    pub val_count: usize,
    pub split_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            format: DataFormat::Shapes,
            path: None,
            max_images: 0,
            shapes_count: 600,
            shapes_seed: 0,
            val_count: 100,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Small,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub render_mode: RenderMode,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Toy,
            model: ModelConfig::toy(32, 5),
            render_mode: RenderMode::Tiled,
            train: TrainConfig::default(),
            data: DataSpec::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse_as<T: FromStr>(key: &str, line: usize, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| CliError::BadValue {
        key: key.to_string(),
        line,
        message: format!("cannot parse {value:?}: {e}"),
    })
}

fn parse_bool(key: &str, line: usize, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::BadValue {
            key: key.to_string(),
            line,
            message: format!("expected true or false, got {value:?}"),
        }),
    }
}

fn nearest_key(key: &str) -> Option<String> {
    KEYS.iter()
        .map(|(k, _)| (strsim::jaro_winkler(key, k), *k))
        .filter(|(score, _)| *score > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string())
}

struct Entry<'a> {
    key: &'a str,
    value: &'a str,
    line: usize,
}

fn tokenize(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(CliError::Syntax {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(CliError::UnknownKey {
                key: key.to_string(),
                line,
                suggestion: nearest_key(key),
            });
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(CliError::BadValue {
                key: key.to_string(),
                line,
                message: format!("already set on line {}", prev.line),
            });
        }
        entries.push(Entry { key, value, line });
    }
    Ok(entries)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let entries = tokenize(text)?;
        let find = |key: &str| entries.iter().find(|e| e.key == key);

        let mut cfg = RunConfig::default();
        let preset = match find("preset") {
            None => Preset::Toy,
            Some(e) => match e.value {
                "toy" => Preset::Toy,
                "small" => Preset::Small,
                _ => {
                    return Err(CliError::BadValue {
                        key: e.key.into(),
                        line: e.line,
                        message: "expected toy or small".into(),
                    })
                }
            },
        };
        let k = find("k").map(|e| parse_as(e.key, e.line, e.value)).transpose()?.unwrap_or(32);
        let classes = find("num_classes")
            .map(|e| parse_as(e.key, e.line, e.value))
            .transpose()?
            .unwrap_or(5);
        cfg.preset = preset;
        cfg.model = match preset {
            Preset::Toy => ModelConfig::toy(k, classes),
            Preset::Small => ModelConfig::small(k, classes),
        };

        for e in &entries {
            cfg.apply(e)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        let (key, line, v) = (e.key, e.line, e.value);
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "preset" | "k" | "num_classes" => {}
            "image_size" => m.image_size = parse_as(key, line, v)?,
            "patch_size" => m.patch_size = parse_as(key, line, v)?,
            "encoder_width" => m.encoder.width = parse_as(key, line, v)?,
            "encoder_depth" => m.encoder.depth = parse_as(key, line, v)?,
            "encoder_heads" => m.encoder.heads = parse_as(key, line, v)?,
            "encoder_mlp" => m.encoder.mlp_hidden = parse_as(key, line, v)?,
            "classifier_width" => m.classifier.width = parse_as(key, line, v)?,
            "classifier_depth" => m.classifier.depth = parse_as(key, line, v)?,
            "classifier_heads" => m.classifier.heads = parse_as(key, line, v)?,
            "classifier_mlp" => m.classifier.mlp_hidden = parse_as(key, line, v)?,
            "use_class_token" => m.use_class_token = parse_bool(key, line, v)?,
            "classifier_positions" => m.classifier_positions = parse_bool(key, line, v)?,
            "classifier_final_norm" => m.classifier_final_norm = parse_bool(key, line, v)?,
            "scale_bound" => m.scale_bound = parse_as(key, line, v)?,
            "render_mode" => {
                self.render_mode = match v {
                    "tiled" => RenderMode::Tiled,
                    "exact" => RenderMode::Exact,
                    _ => {
                        return Err(CliError::BadValue {
                            key: key.into(),
                            line,
                            message: "expected tiled or exact".into(),
                        })
                    }
                }
            }
            "base_lr" => t.base_lr = parse_as(key, line, v)?,
            "batch_size" => t.batch_size = parse_as(key, line, v)?,
            "epochs_warmup_encoder" => t.epochs.warmup_encoder = parse_as(key, line, v)?,
            "epochs_perc_on" => t.epochs.perc_on = parse_as(key, line, v)?,
            "epochs_classifier_pretrain" => t.epochs.classifier_pretrain = parse_as(key, line, v)?,
            "epochs_classifier_joint" => t.epochs.classifier_joint = parse_as(key, line, v)?,
            "epochs_guidance" => t.epochs.guidance = parse_as(key, line, v)?,
            "warmup_epochs" => t.warmup_epochs = parse_as(key, line, v)?,
            "beta1" => t.optimizer.beta1 = parse_as(key, line, v)?,
            "beta2" => t.optimizer.beta2 = parse_as(key, line, v)?,
            "eps" => t.optimizer.eps = parse_as(key, line, v)?,
            "weight_decay" => t.optimizer.weight_decay = parse_as(key, line, v)?,
            "guidance_every" => t.guidance_every = parse_as(key, line, v)?,
            "lambda_perc" => t.weights.lambda_perc = parse_as(key, line, v)?,
            "lambda_cls" => t.weights.lambda_cls = parse_as(key, line, v)?,
            "gamma" => {
                t.weights.gamma = parse_as(key, line, v)?;
                t.weights.validated().map_err(|err| CliError::BadValue {
                    key: key.into(),
                    line,
                    message: err.to_string(),
                })?;
            }
            "loss" => t.variant = parse_as::<ReconstructionVariant>(key, line, v)?,
            "hflip" => t.augment.hflip = parse_bool(key, line, v)?,
            "crop" => t.augment.crop = parse_bool(key, line, v)?,
            "seed" => t.seed = parse_as(key, line, v)?,
            "chunk_size" => t.chunk_size = parse_as(key, line, v)?,
            "dataset" => d.format = parse_as(key, line, v)?,
            "data_path" => d.path = Some(PathBuf::from(v)),
            "max_images" => d.max_images = parse_as(key, line, v)?,
            "shapes_count" => d.shapes_count = parse_as(key, line, v)?,
            "shapes_seed" => d.shapes_seed = parse_as(key, line, v)?,
            "val_count" => d.val_count = parse_as(key, line, v)?,
            "split_seed" => d.split_seed = parse_as(key, line, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => unreachable!("key {other} listed but not handled"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.format != DataFormat::Shapes && self.data.path.is_none() {
            return Err(CliError::validation(format!(
                "dataset {} needs data_path",
                self.data.format.name()
            )));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let b = |v: bool| v.to_string();
        match key {
            "preset" => match self.preset {
                Preset::Toy => "toy".into(),
                Preset::Small => "small".into(),
            },
            "k" => m.k.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "image_size" => m.image_size.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "encoder_width" => m.encoder.width.to_string(),
            "encoder_depth" => m.encoder.depth.to_string(),
            "encoder_heads" => m.encoder.heads.to_string(),
            "encoder_mlp" => m.encoder.mlp_hidden.to_string(),
            "classifier_width" => m.classifier.width.to_string(),
            "classifier_depth" => m.classifier.depth.to_string(),
            "classifier_heads" => m.classifier.heads.to_string(),
            "classifier_mlp" => m.classifier.mlp_hidden.to_string(),
            "use_class_token" => b(m.use_class_token),
            "classifier_positions" => b(m.classifier_positions),
            "classifier_final_norm" => b(m.classifier_final_norm),
            "scale_bound" => m.scale_bound.to_string(),
            "render_mode" => match self.render_mode {
                RenderMode::Tiled => "tiled".into(),
                RenderMode::Exact => "exact".into(),
            },
            "base_lr" => t.base_lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs_warmup_encoder" => t.epochs.warmup_encoder.to_string(),
            "epochs_perc_on" => t.epochs.perc_on.to_string(),
            "epochs_classifier_pretrain" => t.epochs.classifier_pretrain.to_string(),
            "epochs_classifier_joint" => t.epochs.classifier_joint.to_string(),
            "epochs_guidance" => t.epochs.guidance.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "beta1" => t.optimizer.beta1.to_string(),
            "beta2" => t.optimizer.beta2.to_string(),
            "eps" => t.optimizer.eps.to_string(),
            "weight_decay" => t.optimizer.weight_decay.to_string(),
            "guidance_every" => t.guidance_every.to_string(),
            "lambda_perc" => t.weights.lambda_perc.to_string(),
            "lambda_cls" => t.weights.lambda_cls.to_string(),
            "gamma" => t.weights.gamma.to_string(),
            "loss" => t.variant.to_string(),
            "hflip" => b(t.augment.hflip),
            "crop" => b(t.augment.crop),
            "seed" => t.seed.to_string(),
            "chunk_size" => t.chunk_size.to_string(),
            "dataset" => d.format.name().into(),
            "data_path" => d.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "max_images" => d.max_images.to_string(),
            "shapes_count" => d.shapes_count.to_string(),
            "shapes_seed" => d.shapes_seed.to_string(),
            "val_count" => d.val_count.to_string(),
            "split_seed" => d.split_seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            other => unreachable!("key {other} listed but not handled"),
        }
    }

    /// Every key, one per line; `parse(to_text())` reproduces the value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, _) in KEYS {
            let v = self.value_of(key);
            if v.is_empty() {
                continue;
            }
            writeln!(s, "{key} = {v}").expect("writing to a string");
        }
        s
    }
}
