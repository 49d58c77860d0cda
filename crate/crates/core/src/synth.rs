//! Labeled synthetic scenes for toy training.

use alloc::format;
use alloc::vec::Vec;

use crate::cloud::{PointCloud, RangeSpec};
use crate::error::{Error, Result};
use crate::rng::{named_rng, next_range, next_unit_f64};

// Inherent float math is std-only; route through the trait otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// An oriented 3D box with a class id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectBox {
    pub center: [f64; 3],
    /// Length, width, height in meters.
    pub size: [f64; 3],
    /// Heading around +z, in `(-pi, pi]`.
    pub yaw: f64,
    pub class_id: u32,
}

impl ObjectBox {
    /// Axis-aligned BEV footprint half-extents of the rotated box.
    pub fn bev_half_extents(&self) -> (f64, f64) {
        let (l, w) = (self.size[0], self.size[1]);
        let (s, c) = (self.yaw.sin().abs(), self.yaw.cos().abs());
        ((l * c + w * s) * 0.5, (l * s + w * c) * 0.5)
    }

    /// Whether a point lies inside the oriented box.
    pub fn contains(&self, p: &[f32; 4]) -> bool {
        let dx = p[0] as f64 - self.center[0];
        let dy = p[1] as f64 - self.center[1];
        let dz = p[2] as f64 - self.center[2];
        let (s, c) = (self.yaw.sin(), self.yaw.cos());
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.size[0] * 0.5 + 1e-9
            && v.abs() <= self.size[1] * 0.5 + 1e-9
            && dz.abs() <= self.size[2] * 0.5 + 1e-9
    }
}

/// A point cloud with ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub boxes: Vec<ObjectBox>,
}

/// Points generated inside each object box.
pub const POINTS_PER_OBJECT: usize = 64;

const SIZE_LO: [f64; 3] = [3.2, 1.5, 1.3];
const SIZE_HI: [f64; 3] = [4.6, 1.9, 1.8];

/// Generates a scene in the default range.
pub fn synth_scene(seed: u64, n_objects: usize, noise_points: usize) -> Result<SyntheticScene> {
    synth_scene_in(&RangeSpec::default(), seed, n_objects, noise_points)
}

/// Generates `n_objects` box-shaped point clusters plus uniform noise,
/// all inside the half-open range. Deterministic for a fixed seed.
pub fn synth_scene_in(
    range: &RangeSpec,
    seed: u64,
    n_objects: usize,
    noise_points: usize,
) -> Result<SyntheticScene> {
    range.validate()?;
    if n_objects == 0 {
        return Err(Error::Domain("synth_scene requires n_objects >= 1".into()));
    }
    let mut rng = named_rng(seed, "synth.scene");
    let mut boxes: Vec<ObjectBox> = Vec::with_capacity(n_objects);
    let mut points = Vec::with_capacity(n_objects * POINTS_PER_OBJECT + noise_points);

    for obj in 0..n_objects {
        let size = [
            next_range(&mut rng, SIZE_LO[0], SIZE_HI[0]),
            next_range(&mut rng, SIZE_LO[1], SIZE_HI[1]),
            next_range(&mut rng, SIZE_LO[2], SIZE_HI[2]),
        ];
        // yaw in (-pi, pi]: u in [0,1) maps to pi - 2*pi*u
        let yaw = core::f64::consts::PI * (1.0 - 2.0 * next_unit_f64(&mut rng));
        let mut probe = ObjectBox {
            center: [0.0; 3],
            size,
            yaw,
            class_id: 0,
        };
        let (ex, ey) = probe.bev_half_extents();
        let ez = size[2] * 0.5;
        let [xlo, xhi] = range.x;
        let [ylo, yhi] = range.y;
        let [zlo, zhi] = range.z;
        if xhi - xlo <= 2.0 * ex || yhi - ylo <= 2.0 * ey || zhi - zlo <= 2.0 * ez {
            return Err(Error::Domain(format!(
                "object {obj} of size {:?} does not fit the range",
                size
            )));
        }
        // Rejection-sample the center so footprints stay disjoint;
        // overlapping truth boxes would make suppression ambiguous.
        let mut placed = false;
        for _ in 0..64 {
            probe.center = [
                next_range(&mut rng, xlo + ex, xhi - ex),
                next_range(&mut rng, ylo + ey, yhi - ey),
                next_range(&mut rng, zlo + ez, zhi - ez),
            ];
            let clear = boxes.iter().all(|b| {
                let (bx, by) = b.bev_half_extents();
                (probe.center[0] - b.center[0]).abs() > ex + bx + 0.5
                    || (probe.center[1] - b.center[1]).abs() > ey + by + 0.5
            });
            if clear {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Domain(format!(
                "could not place object {obj} without overlap; range too crowded"
            )));
        }

        let (s, c) = (yaw.sin(), yaw.cos());
        for _ in 0..POINTS_PER_OBJECT {
            let u = next_range(&mut rng, -size[0] * 0.5, size[0] * 0.5);
            let v = next_range(&mut rng, -size[1] * 0.5, size[1] * 0.5);
            let w = next_range(&mut rng, -size[2] * 0.5, size[2] * 0.5);
            let x = probe.center[0] + c * u - s * v;
            let y = probe.center[1] + s * u + c * v;
            let z = probe.center[2] + w;
            let r = next_unit_f64(&mut rng);
            points.push([x as f32, y as f32, z as f32, r as f32]);
        }
        boxes.push(probe);
    }

    for _ in 0..noise_points {
        points.push([
            next_range(&mut rng, range.x[0], range.x[1]) as f32,
            next_range(&mut rng, range.y[0], range.y[1]) as f32,
            next_range(&mut rng, range.z[0], range.z[1]) as f32,
            next_unit_f64(&mut rng) as f32,
        ]);
    }

    Ok(SyntheticScene {
        cloud: PointCloud::new(points),
        boxes,
    })
}
