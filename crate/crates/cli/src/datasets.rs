//! Dataset ingestion.
//!
//! * `image-dir`: a directory with `labels.csv` (header `file,label`) whose
//!   rows name an image file relative to the directory and its class. Classes
//!   are listed in order by an optional `classes.txt`; without it they are the
//!   distinct labels, sorted numerically when they all parse as integers and
//!   lexically otherwise.
//! * `mnist`: a directory with `train-images-idx3-ubyte` and
//!   `train-labels-idx1-ubyte`; grayscale is replicated to three channels.
//! * `cifar`: a CIFAR-10 binary batch file, or a directory whose
//!   `data_batch_*.bin` files are read in name order.

use std::path::{Path, PathBuf};

use gvit_core::data::{synthetic_shapes, Dataset, ShapesConfig};
use gvit_core::Tensor;
use image::RgbImage;
use rayon::prelude::*;

use crate::config::{DataFormat, RunConfig};
use crate::error::{CliError, Result};
use crate::imageio::{load_image, resize_square, rgb_to_tensor};

pub const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_ROW: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CliError::format(path, "truncated idx header"))
}

fn limited(n: usize, limit: usize) -> usize {
    if limit == 0 {
        n
    } else {
        n.min(limit)
    }
}

/// Parses an idx3 image file and its idx1 label file.
pub fn parse_mnist(images: &[u8], labels: &[u8], size: usize, limit: usize, dir: &Path) -> Result<Dataset> {
    let ipath = dir.join(MNIST_IMAGES);
    let lpath = dir.join(MNIST_LABELS);
    if be_u32(images, 0, &ipath)? != MNIST_IMAGE_MAGIC {
        return Err(CliError::format(&ipath, "bad idx3 magic"));
    }
    if be_u32(labels, 0, &lpath)? != MNIST_LABEL_MAGIC {
        return Err(CliError::format(&lpath, "bad idx1 magic"));
    }
    let n = be_u32(images, 4, &ipath)? as usize;
    let (rows, cols) = (be_u32(images, 8, &ipath)? as usize, be_u32(images, 12, &ipath)? as usize);
    if be_u32(labels, 4, &lpath)? as usize != n {
        return Err(CliError::format(&lpath, "label count differs from image count"));
    }
    if images.len() != 16 + n * rows * cols {
        return Err(CliError::format(&ipath, "file size does not match header"));
    }
    if labels.len() != 8 + n {
        return Err(CliError::format(&lpath, "file size does not match header"));
    }
    let n = limited(n, limit);
    let lab: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    if let Some(bad) = lab.iter().find(|&&l| l > 9) {
        return Err(CliError::format(&lpath, format!("label {bad} outside 0..=9")));
    }
    let imgs: Vec<Tensor> = (0..n)
        .into_par_iter()
        .map(|i| {
            let px = &images[16 + i * rows * cols..16 + (i + 1) * rows * cols];
            let rgb = RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
                let v = px[y as usize * cols + x as usize];
                image::Rgb([v, v, v])
            });
            rgb_to_tensor(&resize_square(rgb, size))
        })
        .collect();
    let names = (0..10).map(|d| d.to_string()).collect();
    Ok(Dataset::new(size, imgs, lab, names)?)
}

/// Parses concatenated CIFAR-10 binary rows.
pub fn parse_cifar(bytes: &[u8], size: usize, limit: usize, path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_ROW != 0 {
        return Err(CliError::format(
            path,
            format!("size {} is not a multiple of the {CIFAR_ROW}-byte row", bytes.len()),
        ));
    }
    let n = limited(bytes.len() / CIFAR_ROW, limit);
    let rows: Vec<&[u8]> = bytes.chunks_exact(CIFAR_ROW).take(n).collect();
    if let Some(bad) = rows.iter().find(|r| r[0] > 9) {
        return Err(CliError::format(path, format!("label {} outside 0..=9", bad[0])));
    }
    let imgs: Vec<Tensor> = rows
        .par_iter()
        .map(|row| {
            let planes = &row[1..];
            let rgb = RgbImage::from_fn(32, 32, |x, y| {
                let p = (y * 32 + x) as usize;
                image::Rgb([planes[p], planes[1024 + p], planes[2048 + p]])
            });
            rgb_to_tensor(&resize_square(rgb, size))
        })
        .collect();
    let labels = rows.iter().map(|r| r[0] as usize).collect();
    Ok(Dataset::new(size, imgs, labels, CIFAR_CLASSES.iter().map(|s| s.to_string()).collect())?)
}

fn load_cifar(path: &Path, size: usize, limit: usize) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut f: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        f.sort();
        if f.is_empty() {
            return Err(CliError::format(path, "no data_batch_*.bin files"));
        }
        f
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = read(f)?;
        if chunk.len() % CIFAR_ROW != 0 {
            return Err(CliError::format(f, "truncated CIFAR row"));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes, size, limit, path)
}

/// Optional, one class name per line; fixes the label order of an image directory.
pub const CLASSES_FILE: &str = "classes.txt";

fn load_image_dir(root: &Path, size: usize, limit: usize) -> Result<Dataset> {
    let csv_path = root.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&csv_path)
        .map_err(|e| csv_error(&csv_path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(&csv_path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "file" || &headers[1] != "label" {
        return Err(CliError::format(&csv_path, "header must be `file,label`"));
    }
    let mut rows: Vec<(PathBuf, String)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(&csv_path, e))?;
        rows.push((root.join(&rec[0]), rec[1].to_string()));
    }
    rows.truncate(limited(rows.len(), limit));
    if rows.is_empty() {
        return Err(CliError::format(&csv_path, "no images listed"));
    }

    let classes_path = root.join(CLASSES_FILE);
    let names: Vec<String> = if classes_path.exists() {
        let text = std::fs::read_to_string(&classes_path).map_err(|e| CliError::io(&classes_path, e))?;
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    } else {
        let mut names: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
        names.sort();
        names.dedup();
        if names.iter().all(|n| n.parse::<u64>().is_ok()) {
            names.sort_by_key(|n| n.parse::<u64>().expect("checked"));
        }
        names
    };
    let labels = rows
        .iter()
        .map(|(_, l)| {
            names
                .iter()
                .position(|n| n == l)
                .ok_or_else(|| CliError::format(&classes_path, format!("label `{l}` is not listed")))
        })
        .collect::<Result<Vec<_>>>()?;
    let images = rows
        .par_iter()
        .map(|(p, _)| load_image(p, size))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(size, images, labels, names)?)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::io(path, source),
        other => CliError::format(path, format!("{other:?}")),
    }
}

/// Loads the configured dataset at the model's image size and checks that
/// its class count matches the model.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let size = cfg.model.image_size;
    let d = &cfg.data;
    let path = || d.path.as_deref().ok_or_else(|| CliError::validation("data_path is not set"));
    let ds = match d.format {
        DataFormat::Shapes => synthetic_shapes(ShapesConfig {
            num_classes: cfg.model.num_classes,
            count: d.shapes_count,
            image_size: size,
            seed: d.shapes_seed,
        })?,
        DataFormat::ImageDir => load_image_dir(path()?, size, d.max_images)?,
        DataFormat::Mnist => {
            let dir = path()?;
            parse_mnist(&read(&dir.join(MNIST_IMAGES))?, &read(&dir.join(MNIST_LABELS))?, size, d.max_images, dir)?
        }
        DataFormat::Cifar => load_cifar(path()?, size, d.max_images)?,
    };
    if ds.num_classes() != cfg.model.num_classes {
        return Err(CliError::validation(format!(
            "dataset has {} classes but num_classes = {}",
            ds.num_classes(),
            cfg.model.num_classes
        )));
    }
    Ok(ds)
}

/// `(train, val)` with the configured seeded split.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = load_dataset(cfg)?;
    Ok(ds.split(cfg.data.val_count, cfg.data.split_seed)?)
}

/// Writes a dataset as PNG files plus `labels.csv`, readable back as
/// `image-dir`.
pub fn write_image_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let csv_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    w.write_record(["file", "label"]).map_err(|e| csv_error(&csv_path, e))?;
    for (i, (img, &label)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("{i:05}.png");
        crate::imageio::save_rgb(&crate::imageio::tensor_to_rgb(img), &dir.join(&name))?;
        w.write_record([name.as_str(), ds.class_names[label].as_str()])
            .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let classes = dir.join(CLASSES_FILE);
    let mut text = ds.class_names.join("\n");
    text.push('\n');
    std::fs::write(&classes, text).map_err(|e| CliError::io(&classes, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn mnist_is_replicated_to_rgb() {
        let mut px = vec![0u8; 2 * 28 * 28];
        px[0] = 255;
        let images = idx(MNIST_IMAGE_MAGIC, &[2, 28, 28], &px);
        let labels = idx(MNIST_LABEL_MAGIC, &[2], &[3, 7]);
        let ds = parse_mnist(&images, &labels, 28, 0, Path::new("m")).unwrap();
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.num_classes(), 10);
        assert_eq!(&ds.images[0].data()[..4], &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(parse_mnist(&images, &labels, 32, 1, Path::new("m")).unwrap().images[0].shape(), [32, 32, 3]);

        let bad = idx(0x0000_0802, &[2, 28, 28], &px);
        assert!(parse_mnist(&bad, &labels, 28, 0, Path::new("m")).is_err());
        assert!(parse_mnist(&images[..100], &labels, 28, 0, Path::new("m")).is_err());
    }

    #[test]
    fn cifar_rows_are_planar() {
        let mut row = vec![0u8; CIFAR_ROW];
        row[0] = 4;
        row[1] = 10;
        row[1 + 1024] = 20;
        row[1 + 2048] = 30;
        let ds = parse_cifar(&row, 32, 0, Path::new("c")).unwrap();
        assert_eq!(ds.labels, vec![4]);
        let d = ds.images[0].data();
        assert_eq!([d[0], d[1], d[2]].map(|v| (v * 255.0).round() as u8), [10, 20, 30]);
        let err = parse_cifar(&row[..CIFAR_ROW - 1], 32, 0, Path::new("c/data.bin")).unwrap_err();
        assert!(err.to_string().contains("c/data.bin"));
    }
}
