//! Orchestration: configuration, dataset builds, two-stage training,
//! evaluation, checkpointing, and plot emission. Everything here is
//! reproducible from `(RunConfig, seed)`.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod plot;
pub mod rft;
pub mod scenes;
pub mod sft;

pub use checkpoint::{load_checkpoint, save_checkpoint, Progress};
pub use config::RunConfig;
pub use eval::{cmd_eval, EvalOptions, EvalReport, LatencySummary};
pub use plot::cmd_plot;
pub use rft::{cmd_rft, RftOptions, RftOutcome};
pub use scenes::{generate_scenes, load_scenes, write_scenes};
pub use sft::{cmd_sft, prepare_examples, SftOptions, SftOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("{file}:{line}: {what}")]
    Parse { file: String, line: usize, what: String },
    #[error("{0}")]
    Format(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Default output directory: `$MASKPLAN_OUT_DIR` or `./out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os("MASKPLAN_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}
