//! `synth`: generate labeled synthetic scenes.

use std::path::Path;

use mmfusion_core::synth::{synth_scene_in, SyntheticScene};
use mmfusion_core::PipelineConfig;

use crate::errors::CliResult;
use crate::scenes::save_scenes;

pub fn run(
    cfg: &PipelineConfig,
    out: &Path,
    count: usize,
    objects: usize,
    noise: usize,
) -> CliResult<()> {
    let scenes: Vec<SyntheticScene> = (0..count)
        .map(|i| synth_scene_in(&cfg.voxel.range, cfg.seed.wrapping_add(i as u64), objects, noise))
        .collect::<mmfusion_core::Result<_>>()?;
    save_scenes(out, &scenes)?;
    println!(
        "{}",
        serde_json::json!({"scenes": scenes.len(), "objects_per_scene": objects, "noise_points": noise})
    );
    Ok(())
}
