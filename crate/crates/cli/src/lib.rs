//! Library side of the `aquadet` command: experiment configuration, dataset
//! access and the four commands (`synth`, `train`, `eval`, `robustness`).

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use config::{EvalConfig, ExperimentConfig, Pairing};
pub use error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "AQUADET_OUT";

/// `dir` when given, else `$AQUADET_OUT/<command>`, else `runs/<command>`.
pub fn output_dir(dir: Option<std::path::PathBuf>, command: &str) -> std::path::PathBuf {
    dir.unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(std::path::PathBuf::from)
            .unwrap_or_else(|| "runs".into())
            .join(command)
    })
}
