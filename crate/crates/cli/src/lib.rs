//! Experiment runner for the bilevel solvers: TOML configuration, gradient
//! checks against finite differences, seeded runs and engine benches.

pub mod bench;
pub mod check;
pub mod config;
pub mod list;
pub mod report;
pub mod run;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use blo_core::BloError;
use thiserror::Error;

pub use bench::{cmd_bench, BenchConfig, BenchEngine, BenchRow};
pub use check::{cmd_check_grad, CheckConfig, CheckOutcome, CheckRow, CheckSettings, CheckStatus};
pub use config::{Emit, ExperimentConfig};
pub use list::cmd_list_problems;
pub use run::{cmd_run, RunOutput, RunRecord};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BLO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "blo-out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Check(_) => 1,
            Self::Config(_) => 2,
            Self::Runtime(_) | Self::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

impl From<BloError> for CliError {
    fn from(e: BloError) -> Self {
        match e {
            BloError::Config(m) => Self::Config(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

/// Output directory precedence: `--out`, then the config file, then
/// [`OUT_DIR_ENV`], then [`DEFAULT_OUT_DIR`].
pub fn resolve_output_dir(flag: Option<&Path>, config: Option<&Path>, env: Option<OsString>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Creates `dir` and proves it writable before any computation starts.
pub fn prepare_output_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let probe = dir.join(".blo-write-probe");
    std::fs::write(&probe, b"").map_err(|e| CliError::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| CliError::io(&probe, e))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}
