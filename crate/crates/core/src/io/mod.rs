//! Persistence and configuration: tensor blobs, PPM images, weight
//! checkpoints, run configs, and run reports.

pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod image;

use std::path::Path;

use serde::Serialize;

use crate::controller::GenerationResult;
use crate::error::{Error, Result};

pub use blob::{load_blob, save_blob};
pub use checkpoint::{load_backbone, load_projector, save_backbone, save_projector};
pub use config::{parse_config, parse_config_str, serialize_config, RunConfig};
pub use image::{ppm_bytes, write_image};

/// True when SUBZERO_DETERMINISTIC=1: single-worker execution and
/// zeroed wall-clock fields, so reports are bit-reproducible.
pub fn deterministic_mode() -> bool {
    std::env::var("SUBZERO_DETERMINISTIC").map(|v| v == "1").unwrap_or(false)
}

/// Per-run report: config echo, per-step cost components and style
/// weight, final metrics, allocation count, wall time.
#[derive(Serialize)]
pub struct RunReport<'a> {
    pub config: &'a RunConfig,
    pub subject_index: usize,
    pub style_index: usize,
    pub prompt: &'a str,
    /// Carries pair, seed, per-step costs, trajectory, metrics,
    /// allocation count, and wall time.
    #[serde(flatten)]
    pub result: &'a GenerationResult,
}

pub fn report_json(report: &RunReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_json(report)?)?;
    Ok(())
}
