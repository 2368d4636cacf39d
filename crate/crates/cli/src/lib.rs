//! Reproducible experiments over the `glclef` library: synthetic data
//! generation, code-switching, multi-seed training, evaluation and
//! sentence-vector projection.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod stats;

use std::path::Path;

use anyhow::Context;
use serde::Serialize;

pub use config::{DataSection, Dataset, ExperimentConfig, FileData, TrainSection};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Process exit code for a failed command: numeric and shape failures are
/// runtime errors, everything else is bad input.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<glclef::Error>() {
            return match e {
                glclef::Error::NonFinite { .. } | glclef::Error::Dimension(_) => EXIT_NUMERIC,
                _ => EXIT_INPUT,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return EXIT_INPUT;
        }
    }
    EXIT_NUMERIC
}
