//! Point clouds and range cropping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Number of channels per point: x, y, z, reflectance.
pub const POINT_CHANNELS: usize = 4;

/// A LiDAR point cloud: x, y, z in meters (sensor frame) plus
/// reflectance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 4]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Axis-aligned crop volume; membership is half-open, `min <= c < max`,
/// so floor-indexing in the voxelizer can never produce an out-of-grid
/// index.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RangeSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Default for RangeSpec {
    /// Front-camera field of view of the usual LiDAR benchmark setup.
    fn default() -> Self {
        RangeSpec {
            x: [0.0, 70.4],
            y: [-40.0, 40.0],
            z: [-3.0, 1.0],
        }
    }
}

impl RangeSpec {
    pub fn validate(&self) -> Result<()> {
        for (axis, [lo, hi]) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "range {axis}: min {lo} must be < max {hi}"
                )));
            }
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("range {axis} must be finite")));
            }
        }
        Ok(())
    }

    pub fn axis(&self, a: usize) -> [f64; 2] {
        [self.x, self.y, self.z][a]
    }

    pub fn extent(&self, a: usize) -> f64 {
        let [lo, hi] = self.axis(a);
        hi - lo
    }

    pub fn contains(&self, p: &[f32; 4]) -> bool {
        (0..3).all(|a| {
            let [lo, hi] = self.axis(a);
            let c = p[a] as f64;
            lo <= c && c < hi
        })
    }
}

/// Keeps exactly the points inside the half-open range, preserving
/// order. Idempotent by construction.
pub fn crop_range(pc: &PointCloud, range: &RangeSpec) -> PointCloud {
    PointCloud {
        points: pc
            .points
            .iter()
            .filter(|p| range.contains(p))
            .copied()
            .collect(),
    }
}
