//! `voxelize`: point dump in, voxel batch out, summary JSON on stdout.

use std::path::Path;

use mmfusion_core::cloud::{crop_range, PointCloud};
use mmfusion_core::voxel::{voxel_index, voxelize_with_indices, VoxelBatch, VoxelConfig, VoxelizeStats};
use mmfusion_core::PipelineConfig;
use serde_json::json;

use crate::errors::CliResult;
use crate::formats::{read_kitti_bin, save_voxel_batch};

/// Voxelizes with the per-point index phase fanned out over `workers`
/// threads; the grouping phase is order-defined, so the result is
/// identical for any worker count.
pub fn voxelize_parallel(
    pc: &PointCloud,
    cfg: &VoxelConfig,
    workers: usize,
) -> mmfusion_core::Result<(VoxelBatch, VoxelizeStats)> {
    let n = pc.len();
    let workers = workers.max(1).min(n.max(1));
    let indices = if workers == 1 || n < 1024 {
        pc.points
            .iter()
            .map(|p| voxel_index(p, cfg))
            .collect::<mmfusion_core::Result<Vec<_>>>()?
    } else {
        let chunk = n.div_ceil(workers);
        let results: Vec<mmfusion_core::Result<Vec<[u32; 3]>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = pc
                .points
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|p| voxel_index(p, cfg)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut indices = Vec::with_capacity(n);
        for r in results {
            indices.extend(r?);
        }
        indices
    };
    voxelize_with_indices(pc, &indices, cfg)
}

pub fn run(cfg: &PipelineConfig, workers: usize, input: &Path, output: &Path) -> CliResult<()> {
    let cloud = read_kitti_bin(input)?;
    let cropped = crop_range(&cloud, &cfg.voxel.range);
    let (batch, stats) = voxelize_parallel(&cropped, &cfg.voxel, workers)?;
    save_voxel_batch(output, &batch)?;

    let grid = batch.grid;
    let kept: u64 = batch.counts.iter().map(|&c| c as u64).sum();
    let summary = json!({
        "k": batch.len(),
        "points_in": cloud.len(),
        "points_cropped": cloud.len() - cropped.len(),
        "points_kept": kept,
        "dropped_by_count": stats.dropped_by_count,
        "dropped_by_cap": stats.dropped_by_cap,
        "grid": {"x": grid[0], "y": grid[1], "z": grid[2]},
    });
    println!("{summary}");
    log::info!("voxelized {} points into {} voxels", cropped.len(), batch.len());
    Ok(())
}
