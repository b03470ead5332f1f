//! Experiment manifests, stage sequencing, persistence and reporting.

use std::path::Path;

use crate::error::Result;

pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use manifest::{load_manifest, validate_manifest, EvaluationConfig, ExperimentManifest, SplitSpec};
pub use pipeline::{declared_stages, run_pipeline, stage_seed, Pipeline, RunRecord, Stage, StageRecord, StageStatus};
pub use report::emit_report;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
