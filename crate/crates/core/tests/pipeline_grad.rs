//! Finite-difference check of the voxel-attention + fusion composition
//! on a three-voxel scene, with the oracle as ground truth.

use mmfusion_core::cloud::{crop_range, PointCloud, RangeSpec};
use mmfusion_core::gradcheck::grad_check;
use mmfusion_core::graph::Graph;
use mmfusion_core::mffm::{self, MffmConfig};
use mmfusion_core::params::ParamStore;
use mmfusion_core::rng::{named_rng, next_range, next_unit_f64, uniform_vec};
use mmfusion_core::tensor::Tensor;
use mmfusion_core::vlpm::{self, VlpmConfig};
use mmfusion_core::voxel::{scatter_bev, voxelize, VoxelConfig};
use mmfusion_core::{streams, Result};

#[test]
fn vlpm_and_fusion_composition_passes_gradient_oracle() {
    let range = RangeSpec {
        x: [0.0, 6.0],
        y: [-3.0, 3.0],
        z: [-1.0, 1.0],
    };
    let voxel_cfg = VoxelConfig {
        voxel_size: [2.0, 2.0, 2.0],
        range,
        max_points_per_voxel: 4,
        max_voxels: 3,
        seed: 0,
        sample_mode: Default::default(),
    };
    let vlpm_cfg = VlpmConfig::with_dim(3);
    let mffm_cfg = MffmConfig {
        pooled_hw: [2, 2],
        channels: 3,
        residual_mode: Default::default(),
        post_channels: vec![2, 3],
    };

    let mut rng = named_rng(1, "pipe.scene");
    let points: Vec<[f32; 4]> = (0..24)
        .map(|_| {
            [
                next_range(&mut rng, 0.0, 6.0) as f32,
                next_range(&mut rng, -3.0, 3.0) as f32,
                next_range(&mut rng, -1.0, 1.0) as f32,
                next_unit_f64(&mut rng) as f32,
            ]
        })
        .collect();
    let cropped = crop_range(&PointCloud::new(points), &range);
    let (batch, _) = voxelize(&cropped, &voxel_cfg).unwrap();
    assert_eq!(batch.len(), 3);

    let mut store: ParamStore<f64> = ParamStore::new(5);
    vlpm::register_params(&mut store, &vlpm_cfg).unwrap();
    mffm::register_params(&mut store, &mffm_cfg).unwrap();
    store.jitter(0.05);

    // Fixed image-side features at the voxel feature width.
    let f_i = Tensor::new(
        vec![3, 2, 2],
        uniform_vec(&mut named_rng(2, "pipe.fi"), 12, -1.0, 1.0),
    )
    .unwrap();
    let mask = Tensor::new(
        vec![3 * 3 * 3],
        uniform_vec(&mut named_rng(3, "pipe.mask"), 27, 0.2, 1.0),
    )
    .unwrap();

    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let feats = vlpm::vlpm_forward(g, &batch, s, &vlpm_cfg)?;
        let f_l = scatter_bev(g, feats, &batch)?; // [3, 3, 3] map
        let img = g.leaf(f_i.clone());
        let fused = mffm::mffm_forward(g, f_l, img, s, &mffm_cfg)?;
        let flat = g.reshape(fused.output, vec![27])?;
        let m = g.leaf(mask.clone());
        let weighted = g.mul(flat, m)?;
        Result::Ok(g.sum_all(weighted))
    };

    let mut g = Graph::new();
    let loss = build(&mut g, &store).unwrap();
    store.zero_grads();
    g.backward(loss, &mut store).unwrap();

    let f = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).data()[0])
    };
    let report = grad_check(&mut store, f, 1e-6, 1e-4).unwrap();
    assert!(
        report.pass,
        "max rel err {} at {}[{}]",
        report.max_rel_err, report.worst_param, report.worst_index
    );
}

#[test]
fn resize_dispatch_grows_via_bilinear() {
    // The shared resize helper must pool when shrinking and interpolate
    // when a dim grows: a delta map pooled then grown stays finite and
    // mass-consistent for constants either way.
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(Tensor::full(vec![1, 4, 11], 3.25));
    let grown = streams::resize_to(&mut g, x, (4, 22)).unwrap();
    assert_eq!(g.dims(grown), &[1, 4, 22]);
    for v in g.value(grown).data() {
        assert!((v - 3.25).abs() < 1e-12);
    }
    let shrunk = streams::resize_to(&mut g, x, (2, 5)).unwrap();
    assert_eq!(g.dims(shrunk), &[1, 2, 5]);
}
