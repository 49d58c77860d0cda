//! Stand-in single-modal encoders.
//!
//! The framework treats both streams as pluggable: any encoder that
//! produces maps of the configured sizes can be swapped in, including
//! precomputed features loaded from file. The built-in stand-ins are
//! minimal differentiable networks:
//!
//! * LiDAR — a stack of stride-2 3x3 convolutions walking
//!   `bev_channels` over the scattered BEV map, a 1x1 projection to the
//!   shared channel width, and an adaptive resize to `lidar_out`;
//! * camera — non-overlapping patch averaging to a coarse grid, two FC
//!   blocks applied per location, and an adaptive resize to `image_out`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{register_fc_block, FcBlockSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where `image_encode` gets its features from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ImageSource {
    /// The built-in patch encoder over a raw RGB tensor.
    #[default]
    StandInEncoder,
    /// Precomputed features supplied as a feature-map file.
    FeatureFile,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct StreamConfig {
    /// LiDAR feature map size (C, H1, W1).
    pub lidar_out: [usize; 3],
    /// Image feature map size (C, H2, W2).
    pub image_out: [usize; 3],
    /// Channel walk of the BEV convolution stack.
    pub bev_channels: Vec<usize>,
    pub image_source: ImageSource,
    /// Raw image spatial dims fed to the stand-in encoder.
    pub image_input_hw: [usize; 2],
    /// Coarse grid of the patch-averaging front end.
    pub image_patch_grid: [usize; 2],
    /// Hidden width of the two per-location FC blocks.
    pub image_fc_hidden: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            lidar_out: [256, 200, 176],
            image_out: [256, 39, 11],
            bev_channels: alloc::vec![16, 32, 48, 64],
            image_source: ImageSource::StandInEncoder,
            image_input_hw: [1216, 352],
            image_patch_grid: [16, 16],
            image_fc_hidden: 256,
        }
    }
}

impl StreamConfig {
    pub fn channels(&self) -> usize {
        self.lidar_out[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.lidar_out[0] != self.image_out[0] {
            return Err(Error::Config(format!(
                "fusion requires equal channel widths: lidar {} vs image {}",
                self.lidar_out[0], self.image_out[0]
            )));
        }
        if self.bev_channels.is_empty() {
            return Err(Error::Config("bev_channels must not be empty".into()));
        }
        if self.lidar_out.contains(&0)
            || self.image_out.contains(&0)
            || self.image_input_hw.contains(&0)
            || self.image_patch_grid.contains(&0)
            || self.image_fc_hidden == 0
            || self.bev_channels.contains(&0)
        {
            return Err(Error::Config("stream dims must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Registers the BEV stack (`bev.conv{i}`, `bev.proj`) and the image
/// stand-in (`img.fc1`, `img.fc2`).
pub fn register_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &StreamConfig,
    bev_in_channels: usize,
) -> Result<()> {
    cfg.validate()?;
    if bev_in_channels == 0 {
        return Err(Error::Config("bev input channel width must be >= 1".into()));
    }
    let mut c_in = bev_in_channels;
    for (i, &c_out) in cfg.bev_channels.iter().enumerate() {
        store.register_weight(
            &format!("bev.conv{i}.w"),
            alloc::vec![c_out, c_in, 3, 3],
            c_in * 9,
        )?;
        store.register_zeros(&format!("bev.conv{i}.b"), alloc::vec![c_out])?;
        c_in = c_out;
    }
    let c = cfg.channels();
    store.register_weight(&format!("bev.proj.w"), alloc::vec![c, c_in, 1, 1], c_in)?;
    store.register_zeros("bev.proj.b", alloc::vec![c])?;

    register_fc_block(store, "img.fc1", FcBlockSpec::new(3, cfg.image_fc_hidden, c))?;
    register_fc_block(store, "img.fc2", FcBlockSpec::new(c, cfg.image_fc_hidden, c))?;
    Ok(())
}

/// Adaptive resize: pooling when both target dims shrink, bilinear
/// otherwise.
pub fn resize_to<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    out_hw: (usize, usize),
) -> Result<NodeId> {
    g.avg_pool2d(x, out_hw)
}

/// Encodes a scattered BEV map into the LiDAR stream features
/// `[C, H1, W1]`.
pub fn bev_encode<T: Scalar>(
    g: &mut Graph<T>,
    bev: NodeId,
    store: &ParamStore<T>,
    cfg: &StreamConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let mut x = bev;
    for i in 0..cfg.bev_channels.len() {
        let w = g.param(store, &format!("bev.conv{i}.w"))?;
        let b = g.param(store, &format!("bev.conv{i}.b"))?;
        x = g.conv2d(x, w, Some(b), 2, 1)?;
        x = g.relu(x);
    }
    let w = g.param(store, "bev.proj.w")?;
    let b = g.param(store, "bev.proj.b")?;
    x = g.conv2d(x, w, Some(b), 1, 0)?;
    resize_to(g, x, (cfg.lidar_out[1], cfg.lidar_out[2]))
}

/// Encodes a raw RGB tensor `[3, h, w]` into the camera stream
/// features `[C, H2, W2]` via the stand-in patch encoder.
pub fn image_encode<T: Scalar>(
    g: &mut Graph<T>,
    img: NodeId,
    store: &ParamStore<T>,
    cfg: &StreamConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let d = g.dims(img);
    if d.len() != 3 || d[0] != 3 {
        return Err(Error::Config(format!(
            "image encoder expects a [3, h, w] tensor, got {:?}",
            d
        )));
    }
    let (gh, gw) = (cfg.image_patch_grid[0], cfg.image_patch_grid[1]);
    let patches = g.avg_pool2d(img, (gh, gw))?; // [3, gh, gw]
    let flat = g.reshape(patches, alloc::vec![3, gh * gw])?;
    let rows = g.transpose(flat)?; // [gh*gw, 3]
    let c = cfg.channels();
    let h1 = g.fc_block(
        rows,
        store,
        "img.fc1",
        FcBlockSpec::new(3, cfg.image_fc_hidden, c),
    )?;
    let h2 = g.fc_block(
        h1,
        store,
        "img.fc2",
        FcBlockSpec::new(c, cfg.image_fc_hidden, c),
    )?;
    let cols = g.transpose(h2)?; // [c, gh*gw]
    let map = g.reshape(cols, alloc::vec![c, gh, gw])?;
    resize_to(g, map, (cfg.image_out[1], cfg.image_out[2]))
}

/// Validates precomputed image features against the configured size.
pub fn validate_image_features<T: Scalar>(map: &Tensor<T>, cfg: &StreamConfig) -> Result<()> {
    if map.dims() != cfg.image_out {
        return Err(Error::Config(format!(
            "image feature dims {:?} do not match configured {:?}",
            map.dims(),
            cfg.image_out
        )));
    }
    Ok(())
}
