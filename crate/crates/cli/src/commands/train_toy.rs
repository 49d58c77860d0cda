//! `train-toy`: plain gradient descent on synthetic scenes.

use std::fmt::Write as _;
use std::path::Path;

use mmfusion_core::train::{recall_over_scenes, train_toy, TraceRow};
use mmfusion_core::{PipelineConfig, Scalar};

use crate::errors::CliResult;
use crate::formats::{save_checkpoint, write_atomic};
use crate::scenes::load_scenes;

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,total,cls,reg,dir\n");
    for row in trace {
        // Shortest round-trip float formatting keeps the file
        // bit-identical across runs of the same build.
        writeln!(out, "{},{},{},{},{}", row.step, row.total, row.cls, row.reg, row.dir).unwrap();
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn run<T: Scalar>(
    cfg: &PipelineConfig,
    scenes_path: &Path,
    steps: usize,
    lr: f64,
    out: &Path,
    trace_path: &Path,
) -> CliResult<()> {
    let scenes = load_scenes(scenes_path)?;
    let mut store = cfg.init_params::<T>()?;
    let trace = train_toy(cfg, &scenes, steps, lr, &mut store)?;
    save_checkpoint(out, &store)?;
    write_atomic(trace_path, trace_csv(&trace).as_bytes())?;

    let recall = recall_over_scenes(cfg, &scenes, &store)?;
    let (first, last) = (trace.first(), trace.last());
    let summary = serde_json::json!({
        "steps": trace.len(),
        "initial_total": first.map(|r| r.total),
        "final_total": last.map(|r| r.total),
        "recall": recall,
    });
    println!("{summary}");
    Ok(())
}
