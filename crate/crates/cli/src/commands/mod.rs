//! Subcommand implementations.

pub mod bench;
pub mod encode;
pub mod fuse;
pub mod gradcheck;
pub mod synth;
pub mod train_toy;
pub mod vlpm;
pub mod voxelize;

use std::path::Path;

use mmfusion_core::{ParamStore, PipelineConfig, Scalar};

use crate::errors::CliResult;
use crate::formats::load_checkpoint_into;

/// Seeded parameters, overwritten from a checkpoint when one is given.
pub fn init_store<T: Scalar>(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
) -> CliResult<ParamStore<T>> {
    let mut store = cfg.init_params::<T>()?;
    if let Some(path) = checkpoint {
        load_checkpoint_into(path, &mut store)?;
    }
    Ok(store)
}
