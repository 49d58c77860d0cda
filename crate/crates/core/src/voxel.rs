//! Voxelization of range-cropped point clouds and BEV scattering.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::{PointCloud, RangeSpec, POINT_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{named_rng, shuffle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// Inherent float math is std-only; route through the trait otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Default cap on non-empty voxels while training.
pub const MAX_VOXELS_TRAIN: usize = 16_000;
/// Cap on non-empty voxels at evaluation time.
pub const MAX_VOXELS_EVAL: usize = 40_000;

/// How points are sampled inside an over-full voxel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SampleMode {
    /// Keep the first N points in original index order (deterministic).
    #[default]
    FirstByIndex,
    /// Keep a seeded random subset, restored to original index order.
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct VoxelConfig {
    /// Voxel edge lengths (x, y, z) in meters.
    pub voxel_size: [f64; 3],
    pub range: RangeSpec,
    /// Max points sampled per voxel (N).
    pub max_points_per_voxel: usize,
    /// Cap on non-empty voxels.
    pub max_voxels: usize,
    /// Seed for the cap-selection shuffle and random sampling.
    pub seed: u64,
    pub sample_mode: SampleMode,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        VoxelConfig {
            voxel_size: [0.05, 0.05, 0.1],
            range: RangeSpec::default(),
            max_points_per_voxel: 5,
            max_voxels: MAX_VOXELS_TRAIN,
            seed: 0,
            sample_mode: SampleMode::FirstByIndex,
        }
    }
}

impl VoxelConfig {
    /// Grid cell counts (x, y, z). Each range extent must be an integer
    /// multiple of the voxel size within 1e-6 relative.
    pub fn grid(&self) -> Result<[usize; 3]> {
        self.validate()?;
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = self.range.extent(a);
            let cells = extent / self.voxel_size[a];
            let rounded = cells.round();
            if rounded < 1.0 || ((cells - rounded).abs() / cells) > 1e-6 {
                return Err(Error::Config(format!(
                    "axis {a}: extent {extent} is not a multiple of voxel size {}",
                    self.voxel_size[a]
                )));
            }
            dims[a] = rounded as usize;
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        if self.voxel_size.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!(
                "voxel_size must be positive, got {:?}",
                self.voxel_size
            )));
        }
        if self.max_points_per_voxel == 0 {
            return Err(Error::Config("max_points_per_voxel must be >= 1".into()));
        }
        if self.max_voxels == 0 {
            return Err(Error::Config("max_voxels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Grid coordinates of an in-range point: `floor((c - min) / size)` per
/// axis. Out-of-range points are a caller bug and rejected.
pub fn voxel_index(p: &[f32; 4], cfg: &VoxelConfig) -> Result<[u32; 3]> {
    let grid = cfg.grid()?;
    let mut idx = [0u32; 3];
    for a in 0..3 {
        let [lo, hi] = cfg.range.axis(a);
        let c = p[a] as f64;
        if !(lo <= c && c < hi) {
            return Err(Error::Domain(format!(
                "point coordinate {c} outside half-open range [{lo}, {hi}) on axis {a}"
            )));
        }
        let i = ((c - lo) / cfg.voxel_size[a]).floor() as i64;
        // A coordinate epsilon-close to the top boundary can floor to the
        // cell count; clamp since the point is in range by the check above.
        idx[a] = i.clamp(0, grid[a] as i64 - 1) as u32;
    }
    Ok(idx)
}

/// Non-empty voxels with padded per-voxel point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelBatch {
    /// Grid coordinates (ix, iy, iz) per voxel; unique.
    pub indices: Vec<[u32; 3]>,
    /// `k * max_points * 4` padded point data; rows past `counts[k]` are zero.
    pub points: Vec<f32>,
    /// Points kept per voxel, in `[1, max_points]`.
    pub counts: Vec<u32>,
    /// Channel-wise mean over the kept points of each voxel.
    pub means: Vec<[f32; 4]>,
    /// Grid cell counts (x, y, z).
    pub grid: [usize; 3],
    /// Padded row count per voxel (N).
    pub max_points: usize,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// The kept (un-padded) points of voxel `k`, `counts[k]` rows of 4.
    pub fn voxel_points(&self, k: usize) -> &[f32] {
        let stride = self.max_points * POINT_CHANNELS;
        &self.points[k * stride..k * stride + self.counts[k] as usize * POINT_CHANNELS]
    }

    /// Flattened BEV cell (`iy * grid_x + ix`) per voxel.
    pub fn bev_cells(&self) -> Vec<usize> {
        self.indices
            .iter()
            .map(|&[ix, iy, _]| iy as usize * self.grid[0] + ix as usize)
            .collect()
    }
}

/// Points dropped by the two truncation rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VoxelizeStats {
    /// Points beyond `max_points_per_voxel` in kept voxels.
    pub dropped_by_count: usize,
    /// Points in voxels discarded by the `max_voxels` cap.
    pub dropped_by_cap: usize,
}

/// Partitions a range-cropped cloud into voxels.
///
/// Every input point maps to exactly one voxel. Within a voxel at most
/// N points are kept (policy per [`SampleMode`]); if the non-empty
/// voxel count exceeds the cap, survivors are picked by a seeded
/// shuffle and re-ordered by first appearance. Identical inputs give a
/// bit-identical batch.
pub fn voxelize(pc: &PointCloud, cfg: &VoxelConfig) -> Result<(VoxelBatch, VoxelizeStats)> {
    let mut indices = Vec::with_capacity(pc.len());
    for p in &pc.points {
        indices.push(voxel_index(p, cfg)?);
    }
    voxelize_with_indices(pc, &indices, cfg)
}

/// Grouping stage of [`voxelize`], taking precomputed per-point voxel
/// indices (the map phase may run on any number of workers; the result
/// depends only on the index sequence).
pub fn voxelize_with_indices(
    pc: &PointCloud,
    indices: &[[u32; 3]],
    cfg: &VoxelConfig,
) -> Result<(VoxelBatch, VoxelizeStats)> {
    if indices.len() != pc.len() {
        return Err(Error::Domain(format!(
            "{} indices for {} points",
            indices.len(),
            pc.len()
        )));
    }
    let grid = cfg.grid()?;
    for idx in indices {
        if (0..3).any(|a| idx[a] as usize >= grid[a]) {
            return Err(Error::Domain(format!(
                "voxel index {:?} outside grid {:?}",
                idx, grid
            )));
        }
    }

    // Group point ids per voxel, voxels in first-appearance order.
    let mut slot_of: BTreeMap<[u32; 3], usize> = BTreeMap::new();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new(); // (first appearance, members)
    for (pi, idx) in indices.iter().enumerate() {
        match slot_of.get(idx) {
            Some(&slot) => groups[slot].1.push(pi),
            None => {
                slot_of.insert(*idx, groups.len());
                groups.push((pi, vec![pi]));
            }
        }
    }
    let mut voxel_order: Vec<usize> = (0..groups.len()).collect();

    let mut stats = VoxelizeStats::default();
    if voxel_order.len() > cfg.max_voxels {
        let mut shuffled = voxel_order.clone();
        let mut rng = named_rng(cfg.seed, "voxel.cap");
        shuffle(&mut shuffled, &mut rng);
        let mut keep = vec![false; groups.len()];
        for &slot in shuffled.iter().take(cfg.max_voxels) {
            keep[slot] = true;
        }
        for (slot, kept) in keep.iter().enumerate() {
            if !kept {
                stats.dropped_by_cap += groups[slot].1.len();
            }
        }
        voxel_order.retain(|&slot| keep[slot]);
        // Survivors stay in first-appearance order (already ascending).
    }

    let n = cfg.max_points_per_voxel;
    let k = voxel_order.len();
    let mut batch = VoxelBatch {
        indices: Vec::with_capacity(k),
        points: vec![0.0f32; k * n * POINT_CHANNELS],
        counts: Vec::with_capacity(k),
        means: Vec::with_capacity(k),
        grid,
        max_points: n,
    };

    let mut index_of = vec![[0u32; 3]; groups.len()];
    for (idx, &slot) in &slot_of {
        index_of[slot] = *idx;
    }

    for (row, &slot) in voxel_order.iter().enumerate() {
        let members = &groups[slot].1;
        let kept: Vec<usize> = if members.len() <= n {
            members.clone()
        } else {
            stats.dropped_by_count += members.len() - n;
            match cfg.sample_mode {
                SampleMode::FirstByIndex => members[..n].to_vec(),
                SampleMode::SeededRandom => {
                    let idx = index_of[slot];
                    let name = format!("voxel.sample.{}.{}.{}", idx[0], idx[1], idx[2]);
                    let mut rng = named_rng(cfg.seed, &name);
                    let mut picks = members.clone();
                    shuffle(&mut picks, &mut rng);
                    let mut sel = picks[..n].to_vec();
                    sel.sort_unstable();
                    sel
                }
            }
        };
        let mut mean = [0.0f64; 4];
        for (slot_in_voxel, &pi) in kept.iter().enumerate() {
            let p = pc.points[pi];
            let base = (row * n + slot_in_voxel) * POINT_CHANNELS;
            for c in 0..POINT_CHANNELS {
                batch.points[base + c] = p[c];
                mean[c] += p[c] as f64;
            }
        }
        let count = kept.len();
        batch.indices.push(index_of[slot]);
        batch.counts.push(count as u32);
        batch
            .means
            .push(core::array::from_fn(|c| (mean[c] / count as f64) as f32));
    }
    Ok((batch, stats))
}

/// Scatters per-voxel features `[k, c]` onto the BEV plane
/// `[c, grid_y, grid_x]`; cells hit by several voxels (distinct z
/// levels) keep the element-wise maximum.
pub fn scatter_bev<T: Scalar>(
    g: &mut Graph<T>,
    feats: NodeId,
    batch: &VoxelBatch,
) -> Result<NodeId> {
    g.scatter_bev_max(feats, &batch.bev_cells(), (batch.grid[1], batch.grid[0]))
}

/// Value-level scatter for inference paths.
pub fn scatter_bev_map<T: Scalar>(feats: &Tensor<T>, batch: &VoxelBatch) -> Result<Tensor<T>> {
    let mut g: Graph<T> = Graph::new();
    let f = g.leaf(feats.clone());
    let out = scatter_bev(&mut g, f, batch)?;
    Ok(g.value(out).clone())
}
