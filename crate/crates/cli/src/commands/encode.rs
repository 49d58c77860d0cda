//! `encode`: run one stream's stand-in encoder.

use std::path::Path;

use clap::ValueEnum;
use mmfusion_core::graph::Graph;
use mmfusion_core::streams::{self, ImageSource};
use mmfusion_core::tensor::{FeatureMap, Frame};
use mmfusion_core::{PipelineConfig, Scalar};

use crate::errors::{CliError, CliResult};
use crate::formats::{from_f32_tensor, load_feature_map, load_image_tensor, save_feature_map, to_f32_tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StreamArg {
    Lidar,
    Image,
}

pub fn run<T: Scalar>(
    cfg: &PipelineConfig,
    stream: StreamArg,
    input: &Path,
    output: &Path,
    checkpoint: Option<&Path>,
) -> CliResult<()> {
    match stream {
        StreamArg::Lidar => {
            let bev = load_feature_map(input, Frame::Bev)?;
            let expected_c = cfg.vlpm.out_dim();
            if bev.dims()[0] != expected_c {
                return Err(CliError::Config(format!(
                    "BEV map has {} channels, the voxel feature width is {expected_c}",
                    bev.dims()[0]
                )));
            }
            let store = super::init_store::<T>(cfg, checkpoint)?;
            let mut g: Graph<T> = Graph::new();
            let x = g.leaf(from_f32_tensor(bev.tensor()));
            let out = streams::bev_encode(&mut g, x, &store, &cfg.streams)?;
            let map = FeatureMap::new(to_f32_tensor(g.value(out)), Frame::Bev)
                .map_err(CliError::from)?;
            save_feature_map(output, &map)
        }
        StreamArg::Image => match cfg.streams.image_source {
            ImageSource::FeatureFile => {
                let map = load_feature_map(input, Frame::Image)?;
                let as_t = from_f32_tensor::<T>(map.tensor());
                streams::validate_image_features(&as_t, &cfg.streams)?;
                save_feature_map(output, &map)
            }
            ImageSource::StandInEncoder => {
                let img = load_image_tensor(input, cfg.streams.image_input_hw)?;
                let store = super::init_store::<T>(cfg, checkpoint)?;
                let mut g: Graph<T> = Graph::new();
                let x = g.leaf(from_f32_tensor(&img));
                let out = streams::image_encode(&mut g, x, &store, &cfg.streams)?;
                let map = FeatureMap::new(to_f32_tensor(g.value(out)), Frame::Image)
                    .map_err(CliError::from)?;
                save_feature_map(output, &map)
            }
        },
    }
}
