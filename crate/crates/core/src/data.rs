//! In-memory labelled image sets and the synthetic shapes generator.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::{purpose, stream};
use crate::tensor::Tensor;

/// Square RGB images in `[0, 1]` with dense labels and optional per-pixel
/// foreground masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    /// Each `[S, S, 3]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Row-major `S·S` foreground flags per image.
    pub masks: Option<Vec<Vec<bool>>>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(image_size: usize, images: Vec<Tensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ds = Dataset {
            image_size,
            images,
            labels,
            masks: None,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::validation(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let s = self.image_size;
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != [s, s, 3] {
                return Err(Error::validation(format!(
                    "image {i} has shape {:?}, expected [{s}, {s}, 3]",
                    img.shape()
                )));
            }
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::validation(format!(
                "label {l} out of range for {} classes",
                self.class_names.len()
            )));
        }
        if let Some(masks) = &self.masks {
            if masks.len() != self.images.len() || masks.iter().any(|m| m.len() != s * s) {
                return Err(Error::validation("mask count or size does not match images"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Stacked `[B, S, S, 3]` images and their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            image_size: self.image_size,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            masks: self.masks.as_ref().map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
            class_names: self.class_names.clone(),
        }
    }

    /// Seeded shuffle into `(train, val)` with `val_count` validation items.
    pub fn split(&self, val_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if val_count > self.len() {
            return Err(Error::validation(format!(
                "cannot hold out {val_count} of {} images",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(seed, purpose::SPLIT, 0));
        let (val, train) = order.split_at(val_count);
        Ok((self.subset(train), self.subset(val)))
    }
}

pub const SHAPE_NAMES: [&str; 8] = ["disk", "ring", "hbar", "vbar", "cross", "square", "triangle", "pair"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapesConfig {
    pub num_classes: usize,
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Largest figure rotation in radians; orientation separates the bar classes.
const MAX_TILT: f64 = 0.25;

/// Whether local shape coordinates `(u, v)` (unit radius) fall inside `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => (0.45..=1.0).contains(&r2),
        2 => u.abs() <= 1.0 && v.abs() <= 0.35,
        3 => u.abs() <= 0.35 && v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => u.abs().max(v.abs()) <= 0.8,
        6 => v >= -0.5 && v <= 1.0 - 3f64.sqrt() * u.abs(),
        _ => (u.abs() - 0.55).powi(2) + v * v <= 0.2,
    }
}

struct Wave {
    amp: [f64; 3],
    fx: f64,
    fy: f64,
    phase: f64,
}

/// One shapes image, its foreground mask.
fn shapes_image<R: Rng>(class: usize, size: usize, rng: &mut R) -> (Tensor, Vec<bool>) {
    let base: [f64; 3] = [rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35)];
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(0.5..2.0);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            Wave {
                amp: [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)],
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let fg: [f64; 3] = [rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0)];
    let s = size as f64;
    let radius = rng.gen_range(0.3..0.38) * s;
    let cx = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
    let angle = rng.gen_range(-MAX_TILT..MAX_TILT);
    let (ca, sa) = (angle.cos(), angle.sin());

    let mut data = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            // 4×4 supersampling for the coverage fraction.
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = col as f64 + (sx as f64 + 0.5) / 4.0 - cx;
                    let y = row as f64 + (sy as f64 + 0.5) / 4.0 - cy;
                    let u = (ca * x + sa * y) / radius;
                    let v = (-sa * x + ca * y) / radius;
                    hits += usize::from(inside(class, u, v));
                }
            }
            let cover = hits as f64 / 16.0;
            let (nx, ny) = ((col as f64 + 0.5) / s, (row as f64 + 0.5) / s);
            for ch in 0..3 {
                let mut bg = base[ch];
                for w in &waves {
                    bg += w.amp[ch] * (std::f64::consts::TAU * (w.fx * nx + w.fy * ny) + w.phase).sin();
                }
                let bg = bg.clamp(0.0, 1.0);
                data.push(cover * fg[ch] + (1.0 - cover) * bg);
            }
            mask.push(cover >= 0.5);
        }
    }
    (Tensor::new([size, size, 3], data).expect("image layout"), mask)
}

/// Bright geometric figures on darker, smoothly textured backgrounds. Labels cycle
/// through the classes so every class appears `count / num_classes` times;
/// image `i` depends only on `(seed, i)`.
pub fn synthetic_shapes(config: ShapesConfig) -> Result<Dataset> {
    if !(1..=SHAPE_NAMES.len()).contains(&config.num_classes) {
        return Err(Error::validation(format!(
            "shapes dataset supports 1 to {} classes, got {}",
            SHAPE_NAMES.len(),
            config.num_classes
        )));
    }
    if config.image_size < 8 {
        return Err(Error::validation("shapes images must be at least 8 pixels wide"));
    }
    let mut images = Vec::with_capacity(config.count);
    let mut labels = Vec::with_capacity(config.count);
    let mut masks = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let class = i % config.num_classes;
        let mut rng = stream(config.seed, purpose::SHAPES, i as u64);
        let (img, mask) = shapes_image(class, config.image_size, &mut rng);
        images.push(img);
        labels.push(class);
        masks.push(mask);
    }
    let ds = Dataset {
        image_size: config.image_size,
        images,
        labels,
        masks: Some(masks),
        class_names: SHAPE_NAMES[..config.num_classes].iter().map(|s| s.to_string()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}
