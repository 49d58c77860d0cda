//! Aggregate configuration and whole-pipeline forward builders.

use alloc::format;
use alloc::vec::Vec;

use crate::cloud::crop_range;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::head::{self, AnchorConfig, Anchor, LossNodes, LossWeights, Targets};
use crate::mffm::{self, FusionNodes, MffmConfig};
use crate::params::ParamStore;
use crate::rng::{named_rng, uniform_vec};
use crate::scalar::{sc, Scalar};
use crate::streams::{self, StreamConfig};
use crate::synth::SyntheticScene;
use crate::tensor::Tensor;
use crate::vlpm::{self, VlpmConfig};
use crate::voxel::{self, voxelize, VoxelBatch, VoxelConfig, VoxelizeStats};

/// Scalar width of the pipeline tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Configuration of the whole pipeline; cross-module consistency is
/// checked by [`PipelineConfig::validate`], so a loaded config either
/// fails immediately or runs every stage.
#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PipelineConfig {
    pub voxel: VoxelConfig,
    pub vlpm: VlpmConfig,
    pub streams: StreamConfig,
    pub mffm: MffmConfig,
    pub anchors: AnchorConfig,
    pub loss: LossWeights,
    pub seed: u64,
    pub precision: Precision,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        self.voxel.grid()?;
        self.vlpm.validate()?;
        self.streams.validate()?;
        self.mffm.validate()?;
        self.anchors.validate()?;
        self.loss.validate()?;
        if self.streams.channels() != self.mffm.channels {
            return Err(Error::Config(format!(
                "stream channel width {} differs from fusion width {}",
                self.streams.channels(),
                self.mffm.channels
            )));
        }
        Ok(())
    }

    /// Registers every learnable tensor of the pipeline.
    pub fn init_params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new(self.seed);
        vlpm::register_params(&mut store, &self.vlpm)?;
        streams::register_params(&mut store, &self.streams, self.vlpm.out_dim())?;
        mffm::register_params(&mut store, &self.mffm)?;
        head::register_params(&mut store, &self.anchors, self.mffm.channels)?;
        Ok(store)
    }

    /// Spatial grid of the detection head = LiDAR feature map size.
    pub fn head_grid(&self) -> (usize, usize) {
        (self.streams.lidar_out[1], self.streams.lidar_out[2])
    }

    pub fn anchors(&self) -> Result<Vec<Anchor>> {
        head::generate_anchors(&self.anchors, &self.voxel.range, self.head_grid())
    }

    /// A small configuration for 64-bit gradient checking: coarse
    /// 8x8x4 voxel grid, narrow features, 3x3 token grid.
    pub fn tiny_gradcheck() -> Self {
        PipelineConfig {
            voxel: VoxelConfig {
                voxel_size: [8.8, 10.0, 1.0],
                max_points_per_voxel: 3,
                ..VoxelConfig::default()
            },
            vlpm: VlpmConfig::with_dim(4),
            streams: StreamConfig {
                lidar_out: [8, 4, 4],
                image_out: [8, 3, 2],
                bev_channels: alloc::vec![4, 8],
                image_input_hw: [8, 8],
                image_patch_grid: [2, 2],
                image_fc_hidden: 8,
                ..StreamConfig::default()
            },
            mffm: MffmConfig {
                pooled_hw: [3, 3],
                channels: 8,
                post_channels: alloc::vec![4, 8],
                ..MffmConfig::default()
            },
            anchors: AnchorConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            precision: Precision::F64,
        }
    }

    /// A small 32-bit configuration for synthetic-scene overfitting.
    pub fn toy_train() -> Self {
        PipelineConfig {
            voxel: VoxelConfig {
                voxel_size: [4.4, 5.0, 4.0],
                max_points_per_voxel: 5,
                ..VoxelConfig::default()
            },
            vlpm: VlpmConfig::with_dim(8),
            streams: StreamConfig {
                lidar_out: [16, 16, 16],
                image_out: [16, 4, 4],
                bev_channels: alloc::vec![8, 16],
                image_input_hw: [16, 16],
                image_patch_grid: [4, 4],
                image_fc_hidden: 16,
                ..StreamConfig::default()
            },
            mffm: MffmConfig {
                pooled_hw: [4, 4],
                channels: 16,
                post_channels: alloc::vec![8, 16],
                ..MffmConfig::default()
            },
            anchors: AnchorConfig {
                score_threshold: 0.05,
                ..AnchorConfig::default()
            },
            loss: LossWeights::default(),
            seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Deterministic stand-in camera frame for a synthetic scene.
pub fn scene_image<T: Scalar>(cfg: &PipelineConfig, scene_index: usize) -> Tensor<T> {
    let [h, w] = cfg.streams.image_input_hw;
    let mut rng = named_rng(cfg.seed, &format!("scene.{scene_index}.image"));
    let data: Vec<T> = uniform_vec(&mut rng, 3 * h * w, 0.0, 1.0)
        .into_iter()
        .map(sc::<T>)
        .collect();
    Tensor::new(alloc::vec![3, h, w], data).unwrap()
}

/// Everything params-independent about a scene, precomputed once.
pub struct PreparedScene<T: Scalar> {
    pub batch: VoxelBatch,
    pub stats: VoxelizeStats,
    pub image: Tensor<T>,
    pub targets: Targets,
}

/// Crops, voxelizes and assigns targets for a synthetic scene.
pub fn prepare_scene<T: Scalar>(
    cfg: &PipelineConfig,
    scene: &SyntheticScene,
    scene_index: usize,
) -> Result<PreparedScene<T>> {
    let cropped = crop_range(&scene.cloud, &cfg.voxel.range);
    let (batch, stats) = voxelize(&cropped, &cfg.voxel)?;
    let anchors = cfg.anchors()?;
    let targets = head::assign_targets(&anchors, &scene.boxes, &cfg.anchors)?;
    Ok(PreparedScene {
        batch,
        stats,
        image: scene_image(cfg, scene_index),
        targets,
    })
}

/// Voxel features -> BEV scatter -> LiDAR encoder, inside a graph.
pub fn build_lidar_features<T: Scalar>(
    g: &mut Graph<T>,
    batch: &VoxelBatch,
    store: &ParamStore<T>,
    cfg: &PipelineConfig,
) -> Result<NodeId> {
    let feats = vlpm::vlpm_forward(g, batch, store, &cfg.vlpm)?;
    let bev = voxel::scatter_bev(g, feats, batch)?;
    streams::bev_encode(g, bev, store, &cfg.streams)
}

/// Full fusion map from a prepared scene.
pub fn build_fused<T: Scalar>(
    g: &mut Graph<T>,
    prepared: &PreparedScene<T>,
    store: &ParamStore<T>,
    cfg: &PipelineConfig,
) -> Result<FusionNodes> {
    let f_l = build_lidar_features(g, &prepared.batch, store, cfg)?;
    let img = g.leaf(prepared.image.clone());
    let f_i = streams::image_encode(g, img, store, &cfg.streams)?;
    mffm::mffm_forward(g, f_l, f_i, store, &cfg.mffm)
}

/// Scene loss: fused map -> head -> anchor loss.
pub fn build_scene_loss<T: Scalar>(
    g: &mut Graph<T>,
    prepared: &PreparedScene<T>,
    store: &ParamStore<T>,
    cfg: &PipelineConfig,
) -> Result<LossNodes> {
    let fused = build_fused(g, prepared, store, cfg)?;
    let heads = head::head_forward(g, fused.output, store, &cfg.anchors)?;
    head::rpn_loss(g, &heads, &prepared.targets, &cfg.anchors, &cfg.loss)
}

/// Value-level LiDAR BEV map (voxel features scattered, pre-encoder);
/// processes voxels in throwaway graphs.
pub fn lidar_bev_map<T: Scalar>(
    batch: &VoxelBatch,
    store: &ParamStore<T>,
    cfg: &PipelineConfig,
) -> Result<Tensor<T>> {
    let feats = vlpm::vlpm_features(batch, store, &cfg.vlpm)?;
    voxel::scatter_bev_map(&feats, batch)
}
