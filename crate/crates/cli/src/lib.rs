//! Command-line front end: run configuration, dataset ingestion, checkpoints
//! and the `fit`, `train`, `eval`, `render`, `explain` and `dataset-gen`
//! commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod dump;
pub mod error;
pub mod imageio;

pub use error::{CliError, Result};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "GVIT_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::validation(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(format!("cannot size thread pool: {e}")))
}
