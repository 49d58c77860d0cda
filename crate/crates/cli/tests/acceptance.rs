//! Acceptance suite: one test per criterion, each printing a pass line
//! (run with `cargo test -p mmfusion --test acceptance -- --nocapture`).

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmfusion_core::cloud::crop_range;
use mmfusion_core::graph::Graph;
use mmfusion_core::params::ParamStore;
use mmfusion_core::pipeline::PipelineConfig;
use mmfusion_core::rng::{named_rng, next_range, next_unit_f64, shuffle, uniform_vec};
use mmfusion_core::synth::synth_scene;
use mmfusion_core::tensor::Tensor;
use mmfusion_core::train::{recall_over_scenes, train_toy};
use mmfusion_core::voxel::{voxelize, VoxelBatch, VoxelConfig};
use mmfusion_core::{head, mffm, vlpm};

fn pass(n: usize, label: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    println!(
        "acceptance {n} ({label}): PASS in {:.2?} (budget {:.0?})",
        elapsed, budget
    );
    assert!(
        elapsed < budget,
        "criterion {n} exceeded its runtime budget: {elapsed:.2?} >= {budget:.2?}"
    );
}

#[test]
fn criterion_01_configuration_fidelity() {
    let t0 = Instant::now();
    let cfg = PipelineConfig::default();
    cfg.validate().unwrap();
    let grid = cfg.voxel.grid().unwrap();
    // Reported in (y, x, z) order.
    assert_eq!((grid[1], grid[0], grid[2]), (1600, 1408, 40));
    assert_eq!(cfg.streams.lidar_out, [256, 200, 176]);
    assert_eq!(cfg.streams.image_out, [256, 39, 11]);
    assert_eq!(cfg.mffm.pooled_hw, [25, 22]);
    assert_eq!(cfg.mffm.tokens(), 550);
    assert_eq!(cfg.loss.alpha, 2.0);
    assert_eq!(cfg.loss.beta, 0.2);
    pass(1, "configuration fidelity", t0, Duration::from_secs(1));
}

#[test]
fn criterion_02_gradient_oracle() {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_mmfusion"))
        .args(["gradcheck", "--tol", "1e-4"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "gradcheck failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("gradient check passed"), "{stdout}");
    for module in ["vlpm", "streams", "mffm", "head"] {
        assert!(stdout.contains(&format!("module {module}")), "{stdout}");
    }
    pass(2, "gradient oracle", t0, Duration::from_secs(120));
}

#[test]
fn criterion_03_attention_normalization() {
    let t0 = Instant::now();
    for seed in 0..100u64 {
        let mut rng = named_rng(seed, "accept.attn");
        let n = 1 + (seed as usize % 8) * 3;
        let m = 2 + (seed as usize % 6) * 4;
        let c = 1 + (seed as usize % 5) * 4;
        let q = Tensor::new(vec![n, c], uniform_vec(&mut rng, n * c, -3.0, 3.0)).unwrap();
        let k = Tensor::new(vec![m, c], uniform_vec(&mut rng, m * c, -3.0, 3.0)).unwrap();
        let v = Tensor::new(vec![m, c], uniform_vec(&mut rng, m * c, -4.0, 4.0)).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let (qi, ki, vi) = (g.leaf(q), g.leaf(k), g.leaf(v.clone()));
        let (w, a) = mffm::cross_attention(&mut g, qi, ki, vi, c).unwrap();
        for i in 0..n {
            let sum: f64 = (0..m).map(|j| g.value(w).at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-5, "seed {seed} row {i}: sum {sum}");
            for j in 0..m {
                let wij = g.value(w).at2(i, j);
                assert!(wij > 0.0 && wij <= 1.0 + 1e-12);
            }
        }
        for ch in 0..c {
            let lo = (0..m).map(|j| v.at2(j, ch)).fold(f64::INFINITY, f64::min);
            let hi = (0..m).map(|j| v.at2(j, ch)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let x = g.value(a).at2(i, ch);
                assert!(
                    (lo - 1e-9..=hi + 1e-9).contains(&x),
                    "seed {seed}: attended {x} outside [{lo}, {hi}]"
                );
            }
        }
    }
    pass(3, "attention normalization", t0, Duration::from_secs(10));
}

/// A single random voxel in a small config, as a one-voxel batch.
fn one_voxel_batch(seed: u64) -> VoxelBatch {
    let mut rng = named_rng(seed, "accept.voxel");
    let n = 1 + (seed as usize % 8);
    let cfg = VoxelConfig {
        voxel_size: [4.0, 4.0, 4.0],
        range: mmfusion_core::cloud::RangeSpec {
            x: [0.0, 4.0],
            y: [-2.0, 2.0],
            z: [-2.0, 2.0],
        },
        max_points_per_voxel: 8,
        max_voxels: 1,
        seed,
        sample_mode: Default::default(),
    };
    let points: Vec<[f32; 4]> = (0..n)
        .map(|_| {
            [
                next_range(&mut rng, 0.0, 4.0) as f32,
                next_range(&mut rng, -2.0, 2.0) as f32,
                next_range(&mut rng, -2.0, 2.0) as f32,
                next_unit_f64(&mut rng) as f32,
            ]
        })
        .collect();
    voxelize(&mmfusion_core::cloud::PointCloud::new(points), &cfg)
        .unwrap()
        .0
}

#[test]
fn criterion_04_permutation_invariance() {
    let t0 = Instant::now();
    let cfg = mmfusion_core::vlpm::VlpmConfig::with_dim(8);
    let mut store: ParamStore<f32> = ParamStore::new(17);
    vlpm::register_params(&mut store, &cfg).unwrap();

    for seed in 0..100u64 {
        let batch = one_voxel_batch(seed);
        let base = vlpm::vlpm_features::<f32>(&batch, &store, &cfg).unwrap();

        let mut permuted = batch.clone();
        let n = permuted.counts[0] as usize;
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut named_rng(seed, "accept.perm"));
        let rows: Vec<f32> = batch.points[..n * 4].to_vec();
        for (dst, &src) in order.iter().enumerate() {
            for c in 0..4 {
                permuted.points[dst * 4 + c] = rows[src * 4 + c];
            }
        }
        let out = vlpm::vlpm_features::<f32>(&permuted, &store, &cfg).unwrap();
        let diff = base.max_abs_diff(&out);
        assert!(diff < 1e-5, "seed {seed}: deviation {diff}");
    }
    pass(4, "permutation invariance", t0, Duration::from_secs(10));
}

#[test]
fn criterion_05_zero_image_identity() {
    let t0 = Instant::now();
    let cfg = PipelineConfig::toy_train();
    let store: ParamStore<f32> = cfg.init_params().unwrap();
    let mut rng = named_rng(3, "accept.zero");
    let dims = cfg.streams.lidar_out.to_vec();
    let numel: usize = dims.iter().product();
    let f_l = Tensor::new(
        dims,
        uniform_vec(&mut rng, numel, -2.0, 2.0)
            .into_iter()
            .map(|v| v as f32)
            .collect(),
    )
    .unwrap();
    let f_i = Tensor::<f32>::zeros(cfg.streams.image_out.to_vec());

    let mut g = Graph::new();
    let l = g.leaf(f_l.clone());
    let i = g.leaf(f_i);
    let fused = mffm::mffm_forward(&mut g, l, i, &store, &cfg.mffm).unwrap();
    let pre = g.value(fused.pre_stack);
    assert_eq!(pre.dims(), f_l.dims());
    for (a, b) in pre.data().iter().zip(f_l.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "pre-stack fusion drifted from f_L");
    }
    pass(5, "zero-image identity", t0, Duration::from_secs(10));
}

#[test]
fn criterion_06_voxelizer_partition() {
    let t0 = Instant::now();
    let noise = 120_000 - 20 * mmfusion_core::synth::POINTS_PER_OBJECT;
    let scene = synth_scene(42, 20, noise).unwrap();
    assert_eq!(scene.cloud.len(), 120_000);
    let cfg = VoxelConfig::default();
    let cropped = crop_range(&scene.cloud, &cfg.range);

    let (batch1, stats1) = mmfusion::commands::voxelize::voxelize_parallel(&cropped, &cfg, 1).unwrap();
    let (batch8, stats8) = mmfusion::commands::voxelize::voxelize_parallel(&cropped, &cfg, 8).unwrap();
    assert_eq!(batch1, batch8, "worker count changed the batch");
    assert_eq!(stats1, stats8);

    let kept: usize = batch1.counts.iter().map(|&c| c as usize).sum();
    assert_eq!(
        kept + stats1.dropped_by_count + stats1.dropped_by_cap,
        cropped.len(),
        "partition accounting"
    );
    let mut seen = std::collections::BTreeSet::new();
    for idx in &batch1.indices {
        assert!(seen.insert(*idx), "duplicate voxel index {idx:?}");
    }
    assert!(batch1.len() <= cfg.max_voxels);
    pass(6, "voxelizer partition", t0, Duration::from_secs(60));
}

#[test]
fn criterion_07_toy_overfit() {
    let t0 = Instant::now();
    let cfg = PipelineConfig::toy_train();
    let scenes: Vec<_> = (0..5)
        .map(|i| synth_scene(100 + i, 1, 150).unwrap())
        .collect();
    let mut store: ParamStore<f32> = cfg.init_params().unwrap();
    let trace = train_toy(&cfg, &scenes, 500, 2e-3, &mut store).unwrap();
    let initial = trace.first().unwrap().total;
    let final_loss = trace.last().unwrap().total;
    assert!(
        final_loss <= 0.1 * initial,
        "loss only fell from {initial} to {final_loss}"
    );
    let recall = recall_over_scenes(&cfg, &scenes, &store).unwrap();
    assert!(recall >= 0.9, "recall {recall} < 0.9");
    println!("  overfit: initial {initial:.3}, final {final_loss:.3}, recall {recall:.3}");
    pass(7, "toy overfit", t0, Duration::from_secs(600));
}

#[test]
fn criterion_08_loss_composition_arithmetic() {
    let t0 = Instant::now();
    let weights = head::LossWeights::default();
    let mut rng = named_rng(8, "accept.compose");
    for _ in 0..10 {
        let cls = next_range(&mut rng, 0.0, 5.0);
        let reg = next_range(&mut rng, 0.0, 5.0);
        let dir = next_range(&mut rng, 0.0, 5.0);
        let mut g: Graph<f64> = Graph::new();
        let c = g.leaf(Tensor::scalar(cls));
        let r = g.leaf(Tensor::scalar(reg));
        let d = g.leaf(Tensor::scalar(dir));
        let total = head::compose_loss_nodes(&mut g, c, r, d, &weights).unwrap();
        let expect = head::compose_total(cls, reg, dir, &weights);
        assert_eq!(g.value(total).data()[0], expect, "graph and scalar paths differ");
        assert_eq!(expect, (cls + 2.0 * reg) + 0.2 * dir);
    }
    pass(8, "loss composition arithmetic", t0, Duration::from_secs(5));
}

fn run_pipeline(dir: &Path, tag: &str) -> (Vec<u8>, Vec<u8>) {
    let bin = env!("CARGO_BIN_EXE_mmfusion");
    let cfg_path = dir.join("cfg.json");
    mmfusion::config::save_config(&cfg_path, &PipelineConfig::toy_train()).unwrap();
    let cfg = cfg_path.to_str().unwrap().to_string();

    let scene = synth_scene(21, 1, 120).unwrap();
    mmfusion::formats::write_kitti_bin(&dir.join(format!("{tag}.bin")), &scene.cloud).unwrap();
    let fi = mmfusion_core::tensor::FeatureMap::new(
        Tensor::new(
            vec![16, 4, 4],
            uniform_vec(&mut named_rng(2, "accept.fi"), 256, -1.0, 1.0)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        )
        .unwrap(),
        mmfusion_core::tensor::Frame::Image,
    )
    .unwrap();
    mmfusion::formats::save_feature_map(&dir.join(format!("{tag}-fi.mmff")), &fi).unwrap();

    let run = |args: &[String]| {
        let out = Command::new(bin).args(args).current_dir(dir).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "voxelize".into(), "--config".into(), cfg.clone(),
        "--input".into(), format!("{tag}.bin"),
        "--output".into(), format!("{tag}.mmvx"),
    ]);
    run(&[
        "vlpm".into(), "--config".into(), cfg.clone(),
        "--input".into(), format!("{tag}.mmvx"),
        "--output".into(), format!("{tag}-bev.mmff"),
    ]);
    run(&[
        "encode".into(), "--config".into(), cfg.clone(),
        "--stream".into(), "lidar".into(),
        "--input".into(), format!("{tag}-bev.mmff"),
        "--output".into(), format!("{tag}-fl.mmff"),
    ]);
    run(&[
        "fuse".into(), "--config".into(), cfg.clone(),
        "--lidar-features".into(), format!("{tag}-fl.mmff"),
        "--image-features".into(), format!("{tag}-fi.mmff"),
        "--output".into(), format!("{tag}-fused.mmff"),
    ]);
    // short training run for the trace
    let scenes: Vec<_> = (0..2).map(|i| synth_scene(300 + i, 1, 80).unwrap()).collect();
    mmfusion::scenes::save_scenes(&dir.join(format!("{tag}-scenes.json")), &scenes).unwrap();
    run(&[
        "train-toy".into(), "--config".into(), cfg.clone(),
        "--scenes".into(), format!("{tag}-scenes.json"),
        "--steps".into(), "30".into(),
        "--lr".into(), "0.002".into(),
        "--out".into(), format!("{tag}.mmck"),
        "--trace".into(), format!("{tag}-trace.csv"),
    ]);
    (
        std::fs::read(dir.join(format!("{tag}-fused.mmff"))).unwrap(),
        std::fs::read(dir.join(format!("{tag}-trace.csv"))).unwrap(),
    )
}

#[test]
fn criterion_09_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (fused_a, trace_a) = run_pipeline(dir.path(), "a");
    let (fused_b, trace_b) = run_pipeline(dir.path(), "b");
    assert_eq!(fused_a, fused_b, "fused maps differ between identical runs");
    assert_eq!(trace_a, trace_b, "training traces differ between identical runs");
    pass(9, "determinism", t0, Duration::from_secs(300));
}

#[test]
fn criterion_10_throughput_report() {
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_mmfusion"))
        .args(["bench", "--frames", "1", "--reps", "3", "--workers", "8"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fps = report["stages"]["voxelize"]["frames_per_sec"].as_f64().unwrap();
    let pps = report["stages"]["voxelize"]["points_per_sec"].as_f64().unwrap();
    let k = report["k"].as_u64().unwrap();
    assert!(k <= 16_000, "cap violated: {k} voxels");
    // Recorded, not asserted.
    println!("  throughput: {fps:.1} frames/s, {pps:.3e} points/s, k = {k}");
    pass(10, "throughput report (informational)", t0, Duration::from_secs(120));
}
