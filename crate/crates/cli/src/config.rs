//! Pipeline configuration loading.
//!
//! Configs are JSON with every field optional (defaults match the
//! published setup); any cross-module inconsistency is rejected at
//! load, never mid-pipeline.

use std::path::Path;

use mmfusion_core::PipelineConfig;

use crate::errors::{CliError, CliResult};

pub fn load_config(path: &Path) -> CliResult<PipelineConfig> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let cfg: PipelineConfig = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(cfg)
        .map_err(|e| CliError::Config(format!("config encoding failed: {e}")))?;
    crate::formats::write_atomic(path, &bytes)
}
