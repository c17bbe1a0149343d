//! Stages behind the `dynsplat` binary.

pub mod config;
pub mod report;
pub mod stages;

pub use config::{stage_seed, PipelineConfig, Stage};
pub use report::{BaSummary, Flags, OracleErrors, PoseError, RunReport, Timings, TrainReport};
pub use stages::{AtStage, StageError, StageResult};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DYNSPLAT_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> dynsplat::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| dynsplat::Error::InvalidParameter(format!("{THREADS_ENV}={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| dynsplat::Error::InvalidParameter(e.to_string()))
}
