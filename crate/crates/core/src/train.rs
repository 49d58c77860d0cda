//! Plain gradient descent over the full pipeline on synthetic scenes.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{self, Detection};
use crate::params::ParamStore;
use crate::pipeline::{build_fused, build_scene_loss, prepare_scene, PipelineConfig, PreparedScene};
use crate::scalar::{sc, Scalar};
use crate::synth::SyntheticScene;

/// Per-step loss record (values are means over the scene list).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
}

/// Runs `steps` of fixed-learning-rate gradient descent over all
/// pipeline parameters, accumulating gradients over every scene per
/// step. Deterministic for a fixed seed. Fails with the step index if
/// the loss stops being finite.
pub fn train_toy<T: Scalar>(
    cfg: &PipelineConfig,
    scenes: &[SyntheticScene],
    steps: usize,
    lr: f64,
    store: &mut ParamStore<T>,
) -> Result<Vec<TraceRow>> {
    if scenes.is_empty() {
        return Err(Error::Config("train_toy needs at least one scene".into()));
    }
    let prepared: Vec<PreparedScene<T>> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| prepare_scene(cfg, s, i))
        .collect::<Result<_>>()?;
    if prepared.iter().any(|p| p.batch.is_empty()) {
        return Err(Error::Domain(
            "a scene voxelizes to zero voxels; enlarge the scene or shrink the voxels".into(),
        ));
    }

    let scale = sc::<T>(1.0 / scenes.len() as f64);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        store.zero_grads();
        let mut row = TraceRow {
            step,
            total: 0.0,
            cls: 0.0,
            reg: 0.0,
            dir: 0.0,
        };
        for scene in &prepared {
            let mut g = Graph::new();
            // A non-finite value inside any stage is a divergence, not
            // an input defect; report it with the step index.
            let loss = build_scene_loss(&mut g, scene, store, cfg).map_err(|e| match e {
                Error::Numeric(detail) => Error::Training { step, detail },
                other => other,
            })?;
            // Mean over scenes: scale each scene's loss inside the graph
            // so accumulated gradients are the mean gradient.
            let scaled = g.scale(loss.total, scale);
            g.backward(scaled, store)?;
            row.total += g.value(scaled).data()[0].to_f64().unwrap();
            row.cls += g.value(loss.cls).data()[0].to_f64().unwrap() / scenes.len() as f64;
            row.reg += g.value(loss.reg).data()[0].to_f64().unwrap() / scenes.len() as f64;
            row.dir += g.value(loss.dir).data()[0].to_f64().unwrap() / scenes.len() as f64;
        }
        if !row.total.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss became {}", row.total),
            });
        }
        trace.push(row);
        store.sgd_step(sc::<T>(lr));
    }
    Ok(trace)
}

/// Decoded, suppression-filtered detections for one prepared scene.
pub fn detect_scene<T: Scalar>(
    cfg: &PipelineConfig,
    prepared: &PreparedScene<T>,
    store: &ParamStore<T>,
) -> Result<Vec<Detection>> {
    let mut g = Graph::new();
    let fused = build_fused(&mut g, prepared, store, cfg)?;
    let heads = head::head_forward(&mut g, fused.output, store, &cfg.anchors)?;
    let anchors = cfg.anchors()?;
    let dets = head::decode_detections(
        g.value(heads.cls),
        g.value(heads.boxes),
        g.value(heads.dir),
        &anchors,
        &cfg.anchors,
    );
    Ok(head::greedy_nms(dets, cfg.anchors.nms_iou))
}

/// Mean recall over scenes at the configured NMS IoU threshold.
pub fn recall_over_scenes<T: Scalar>(
    cfg: &PipelineConfig,
    scenes: &[SyntheticScene],
    store: &ParamStore<T>,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, scene) in scenes.iter().enumerate() {
        let prepared = prepare_scene::<T>(cfg, scene, i)?;
        let dets = detect_scene(cfg, &prepared, store)?;
        total += head::recall_at_iou(&scene.boxes, &dets, cfg.anchors.nms_iou);
    }
    Ok(total / scenes.len() as f64)
}
