//! `gradcheck`: central-difference verification of every pipeline
//! parameter against the recorded analytic gradients.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mmfusion_core::gradcheck::{grad_check, GradCheckReport};
use mmfusion_core::graph::Graph;
use mmfusion_core::pipeline::{build_scene_loss, prepare_scene, PreparedScene};
use mmfusion_core::synth::synth_scene;
use mmfusion_core::{ParamStore, PipelineConfig};

use crate::errors::{CliError, CliResult};
use crate::formats::write_atomic;

// Small enough that a ReLU preactivation rarely falls inside the
// stencil (the kink makes central differences disagree with the
// subgradient); 64-bit roundoff at this step is still ~1e-8 relative.
const STEP: f64 = 1e-6;

fn module_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        p if p.starts_with("pam") || p == "dwm" => "vlpm",
        "bev" | "img" => "streams",
        "mffm" => "mffm",
        "head" => "head",
        _ => "other",
    }
}

pub fn report_csv(report: &GradCheckReport) -> String {
    let mut out = String::from("module,param,max_rel_err,worst_index,pass\n");
    for e in &report.entries {
        writeln!(
            out,
            "{},{},{:e},{},{}",
            module_of(&e.name),
            e.name,
            e.max_rel_err,
            e.worst_index,
            e.pass
        )
        .unwrap();
    }
    out
}

/// Runs the check on one synthetic scene. Evaluation happens at a
/// jittered parameter point: structured zeros (zero biases fed by the
/// zero self-pair coordinate differences) would otherwise sit exactly
/// on ReLU kinks where central differences disagree with the
/// subgradient. `corrupt` deliberately breaks one analytic gradient
/// (a negative control for the oracle itself).
pub fn run(
    cfg: &PipelineConfig,
    tol: f64,
    out: Option<&Path>,
    corrupt: Option<&str>,
) -> CliResult<()> {
    let scene = synth_scene(cfg.seed.wrapping_add(1), 1, 20).map_err(CliError::from)?;
    let prepared: PreparedScene<f64> = prepare_scene(cfg, &scene, 0)?;
    let mut store: ParamStore<f64> = cfg.init_params()?;
    store.jitter(0.05);

    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let loss = build_scene_loss(g, &prepared, s, cfg)?;
        Ok(loss.total)
    };
    let mut g = Graph::new();
    let loss = build(&mut g, &store)?;
    store.zero_grads();
    g.backward(loss, &mut store)?;

    if let Some(name) = corrupt {
        let n = store.grad(name).map_err(CliError::from)?.numel();
        let mut delta = vec![0.0f64; n];
        delta[0] = 1.0;
        store.accumulate_grad(name, &delta).map_err(CliError::from)?;
    }

    let f = |s: &ParamStore<f64>| -> mmfusion_core::Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(*g.value(loss).data().first().unwrap())
    };
    let report = grad_check(&mut store, f, STEP, tol)?;

    if let Some(path) = out {
        write_atomic(path, report_csv(&report).as_bytes())?;
    }

    let mut per_module: BTreeMap<&str, f64> = BTreeMap::new();
    for e in &report.entries {
        let slot = per_module.entry(module_of(&e.name)).or_insert(0.0);
        *slot = slot.max(e.max_rel_err);
    }
    for (module, worst) in &per_module {
        println!("module {module}: max rel err {worst:e}");
    }
    println!(
        "end_to_end: {} parameters, max rel err {:e} at {}[{}], tolerance {:e}",
        report.entries.len(),
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        tol
    );
    if !report.pass {
        return Err(CliError::Numeric(format!(
            "gradient check failed: {}[{}] has relative error {:e} (tolerance {:e})",
            report.worst_param, report.worst_index, report.max_rel_err, tol
        )));
    }
    println!("gradient check passed");
    Ok(())
}
