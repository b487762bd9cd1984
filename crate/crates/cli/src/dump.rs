//! Gaussian parameter dumps.
//!
//! ```text
//! magic  8 bytes  "GVGAUSS1"
//! k      u32 little-endian
//! rows   k × 9 f64 little-endian, decoded (x, y, s1, s2, phi, r, g, b, o)
//! ```

use std::path::Path;

use gvit_core::gaussian::{DecodedGaussianBatch, PARAMS_PER_GAUSSIAN};
use gvit_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"GVGAUSS1";

pub fn to_bytes(batch: &DecodedGaussianBatch) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    for v in batch.params().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<DecodedGaussianBatch> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CliError::format(path, "not a Gaussian dump (bad magic)"));
    }
    let k = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != k * PARAMS_PER_GAUSSIAN * 8 {
        return Err(CliError::format(
            path,
            format!("expected {} parameter bytes for k = {k}, found {}", k * PARAMS_PER_GAUSSIAN * 8, body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DecodedGaussianBatch::new(Tensor::new([k, PARAMS_PER_GAUSSIAN], data)?)?)
}

pub fn write(path: &Path, batch: &DecodedGaussianBatch) -> Result<()> {
    std::fs::write(path, to_bytes(batch)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<DecodedGaussianBatch> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes, path)
}
