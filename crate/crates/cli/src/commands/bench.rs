//! `bench`: stage timings over synthetic frames.

use std::path::Path;
use std::time::Instant;

use mmfusion_core::cloud::crop_range;
use mmfusion_core::graph::Graph;
use mmfusion_core::head::head_forward;
use mmfusion_core::mffm::mffm_forward;
use mmfusion_core::pipeline::{lidar_bev_map, scene_image, PipelineConfig};
use mmfusion_core::streams::{bev_encode, image_encode};
use mmfusion_core::synth::synth_scene;
use mmfusion_core::ParamStore;
use serde_json::json;

use crate::errors::{CliError, CliResult};
use crate::formats::write_atomic;

/// Points per synthetic benchmark frame.
pub const FRAME_POINTS: usize = 120_000;
const FRAME_OBJECTS: usize = 20;

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

pub fn run(
    cfg: &PipelineConfig,
    workers: usize,
    frames: usize,
    reps: usize,
    full: bool,
    out: Option<&Path>,
) -> CliResult<()> {
    if reps == 0 {
        return Err(CliError::Config("bench needs at least one repetition".into()));
    }
    if frames == 0 {
        return Err(CliError::Config("bench needs at least one frame".into()));
    }

    let clouds: Vec<_> = (0..frames)
        .map(|i| {
            let noise = FRAME_POINTS - FRAME_OBJECTS * mmfusion_core::synth::POINTS_PER_OBJECT;
            let scene = synth_scene(cfg.seed.wrapping_add(i as u64), FRAME_OBJECTS, noise)?;
            Ok(crop_range(&scene.cloud, &cfg.voxel.range))
        })
        .collect::<mmfusion_core::Result<Vec<_>>>()?;

    let mut voxelize_ms = Vec::with_capacity(reps);
    let mut k_last = 0usize;
    for _ in 0..reps {
        let start = Instant::now();
        for cloud in &clouds {
            let (batch, _) = super::voxelize::voxelize_parallel(cloud, &cfg.voxel, workers)?;
            k_last = batch.len();
        }
        voxelize_ms.push(start.elapsed().as_secs_f64() * 1e3 / frames as f64);
    }
    let vox_median = median(&mut voxelize_ms.clone());
    let points_per_sec = FRAME_POINTS as f64 / (vox_median / 1e3);

    let mut stages = json!({
        "voxelize": {
            "samples_ms": voxelize_ms,
            "median_ms": vox_median,
            "points_per_sec": points_per_sec,
            "frames_per_sec": 1e3 / vox_median,
        }
    });

    if full {
        let store: ParamStore<f32> = cfg.init_params()?;
        let (batch, _) = super::voxelize::voxelize_parallel(&clouds[0], &cfg.voxel, workers)?;
        let image = scene_image::<f32>(cfg, 0);

        let mut vlpm_ms = Vec::new();
        let mut encode_ms = Vec::new();
        let mut fuse_ms = Vec::new();
        let mut head_ms = Vec::new();
        let mut end_to_end_ms = Vec::new();
        for _ in 0..reps {
            let whole = Instant::now();
            let t = Instant::now();
            let bev = lidar_bev_map(&batch, &store, cfg)?;
            vlpm_ms.push(t.elapsed().as_secs_f64() * 1e3);

            let t = Instant::now();
            let mut g: Graph<f32> = Graph::new();
            let bev_node = g.leaf(bev.clone());
            let f_l = bev_encode(&mut g, bev_node, &store, &cfg.streams)?;
            let img_node = g.leaf(image.clone());
            let f_i = image_encode(&mut g, img_node, &store, &cfg.streams)?;
            encode_ms.push(t.elapsed().as_secs_f64() * 1e3);

            let t = Instant::now();
            let fused = mffm_forward(&mut g, f_l, f_i, &store, &cfg.mffm)?;
            fuse_ms.push(t.elapsed().as_secs_f64() * 1e3);

            let t = Instant::now();
            let _ = head_forward(&mut g, fused.output, &store, &cfg.anchors)?;
            head_ms.push(t.elapsed().as_secs_f64() * 1e3);
            end_to_end_ms.push(whole.elapsed().as_secs_f64() * 1e3);
        }
        for (name, samples) in [
            ("vlpm_scatter", vlpm_ms),
            ("encode", encode_ms),
            ("fuse", fuse_ms),
            ("head", head_ms),
            ("end_to_end", end_to_end_ms),
        ] {
            stages[name] = json!({
                "samples_ms": samples,
                "median_ms": median(&mut samples.clone()),
            });
        }
    }

    let report = json!({
        "machine": {
            "arch": std::env::consts::ARCH,
            "os": std::env::consts::OS,
            "cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
        "frames": frames,
        "points_per_frame": FRAME_POINTS,
        "reps": reps,
        "workers": workers,
        "k": k_last,
        "max_voxels": cfg.voxel.max_voxels,
        "stages": stages,
    });
    let pretty = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Format(e.to_string()))?;
    println!("{pretty}");
    if let Some(path) = out {
        write_atomic(path, pretty.as_bytes())?;
    }
    Ok(())
}
