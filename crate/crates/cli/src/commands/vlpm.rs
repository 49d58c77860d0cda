//! `vlpm`: voxel batch in, per-voxel features scattered onto the BEV
//! plane out.

use std::path::Path;

use mmfusion_core::pipeline::lidar_bev_map;
use mmfusion_core::tensor::{FeatureMap, Frame};
use mmfusion_core::{PipelineConfig, Scalar};

use crate::errors::CliResult;
use crate::formats::{load_voxel_batch, save_feature_map, to_f32_tensor};

pub fn run<T: Scalar>(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
    checkpoint: Option<&Path>,
) -> CliResult<()> {
    let batch = load_voxel_batch(input)?;
    let store = super::init_store::<T>(cfg, checkpoint)?;
    let bev = lidar_bev_map(&batch, &store, cfg)?;
    let map = FeatureMap::new(to_f32_tensor(&bev), Frame::Bev)
        .map_err(crate::errors::CliError::from)?;
    save_feature_map(output, &map)?;
    log::info!(
        "scattered {} voxels onto a {:?} BEV map",
        batch.len(),
        map.dims()
    );
    Ok(())
}
