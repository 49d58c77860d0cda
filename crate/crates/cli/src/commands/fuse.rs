//! `fuse`: combine LiDAR and image feature maps into the fusion map.

use std::path::Path;

use mmfusion_core::graph::Graph;
use mmfusion_core::mffm::mffm_forward;
use mmfusion_core::tensor::{FeatureMap, Frame};
use mmfusion_core::{PipelineConfig, Scalar};

use crate::errors::{CliError, CliResult};
use crate::formats::{from_f32_tensor, load_feature_map, save_feature_map, to_f32_tensor};

pub fn run<T: Scalar>(
    cfg: &PipelineConfig,
    lidar_path: &Path,
    image_path: &Path,
    output: &Path,
    checkpoint: Option<&Path>,
) -> CliResult<()> {
    let lidar = load_feature_map(lidar_path, Frame::Bev)?;
    let image = load_feature_map(image_path, Frame::Image)?;
    lidar.expect_frame(Frame::Bev)?;
    image.expect_frame(Frame::Image)?;
    if lidar.dims() != cfg.streams.lidar_out {
        return Err(CliError::Config(format!(
            "LiDAR features {:?} do not match configured {:?}",
            lidar.dims(),
            cfg.streams.lidar_out
        )));
    }
    if image.dims() != cfg.streams.image_out {
        return Err(CliError::Config(format!(
            "image features {:?} do not match configured {:?}",
            image.dims(),
            cfg.streams.image_out
        )));
    }
    let store = super::init_store::<T>(cfg, checkpoint)?;
    let mut g: Graph<T> = Graph::new();
    let f_l = g.leaf(from_f32_tensor(lidar.tensor()));
    let f_i = g.leaf(from_f32_tensor(image.tensor()));
    let fused = mffm_forward(&mut g, f_l, f_i, &store, &cfg.mffm)?;
    let map = FeatureMap::new(to_f32_tensor(g.value(fused.output)), Frame::Bev)
        .map_err(CliError::from)?;
    save_feature_map(output, &map)
}
