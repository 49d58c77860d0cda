//! Voxel local perception: per-voxel point attention followed by a
//! dynamic per-point weighting that reduces each voxel to one feature
//! vector.
//!
//! Stage structure per voxel (all blocks are FC blocks, see
//! [`FcBlockSpec`]):
//!
//! * point attention — queries and keys from point coordinates
//!   (`q_i = alpha(c_i)`, `k_i = beta(c_i)`), values from point
//!   features (`v_i = gamma(p_i)`), additive pairwise weights
//!   `w_ij = epsilon(q_i - k_j + delta(c_i - c_j))`, output
//!   `f_i = sum_j w_ij (*) v_j` (element-wise product);
//! * dynamic weights — `w_i = theta(zeta(c_mean) - eta(c_i))`, voxel
//!   feature `sum_i w_i (*) f_i`, with no positional encoding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cloud::POINT_CHANNELS;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{register_fc_block, FcBlockSpec, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;
use crate::voxel::VoxelBatch;

/// Hidden widths of the eight FC blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FcWidths {
    pub alpha: usize,
    pub beta: usize,
    pub gamma: usize,
    pub delta: usize,
    pub epsilon: usize,
    pub theta: usize,
    pub zeta: usize,
    pub eta: usize,
}

impl FcWidths {
    pub fn uniform(width: usize) -> Self {
        FcWidths {
            alpha: width,
            beta: width,
            gamma: width,
            delta: width,
            epsilon: width,
            theta: width,
            zeta: width,
            eta: width,
        }
    }
}

impl Default for FcWidths {
    fn default() -> Self {
        FcWidths::uniform(16)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct VlpmConfig {
    /// Per-point and per-voxel output feature width.
    pub feature_dim: usize,
    pub hidden: FcWidths,
    /// Stacked point-attention stages before the reduction.
    pub num_pam_stages: usize,
    /// Per-channel softmax over the pairwise weights before summing.
    pub normalize_pam_weights: bool,
    /// Reduce over raw 4-channel points instead of attention features.
    pub dwm_on_raw_points: bool,
}

impl VlpmConfig {
    pub fn with_dim(d: usize) -> Self {
        VlpmConfig {
            feature_dim: d,
            hidden: FcWidths::uniform(d),
            num_pam_stages: 2,
            normalize_pam_weights: false,
            dwm_on_raw_points: false,
        }
    }

    /// Width of the per-voxel output vector.
    pub fn out_dim(&self) -> usize {
        if self.dwm_on_raw_points {
            POINT_CHANNELS
        } else {
            self.feature_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("vlpm feature_dim must be >= 1".into()));
        }
        let h = &self.hidden;
        for (name, w) in [
            ("alpha", h.alpha),
            ("beta", h.beta),
            ("gamma", h.gamma),
            ("delta", h.delta),
            ("epsilon", h.epsilon),
            ("theta", h.theta),
            ("zeta", h.zeta),
            ("eta", h.eta),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("vlpm hidden width {name} must be >= 1")));
            }
        }
        if self.num_pam_stages == 0 {
            return Err(Error::Config("vlpm needs at least one attention stage".into()));
        }
        Ok(())
    }
}

impl Default for VlpmConfig {
    fn default() -> Self {
        VlpmConfig::with_dim(16)
    }
}

fn stage_in_dim(cfg: &VlpmConfig, stage: usize) -> usize {
    if stage == 1 {
        POINT_CHANNELS
    } else {
        cfg.feature_dim
    }
}

/// Block specs of one attention stage; stage numbering is 1-based.
fn stage_specs(cfg: &VlpmConfig, stage: usize) -> [(&'static str, FcBlockSpec); 5] {
    let d = cfg.feature_dim;
    let h = &cfg.hidden;
    [
        ("alpha", FcBlockSpec::new(3, h.alpha, d)),
        ("beta", FcBlockSpec::new(3, h.beta, d)),
        ("gamma", FcBlockSpec::new(stage_in_dim(cfg, stage), h.gamma, d)),
        ("delta", FcBlockSpec::new(3, h.delta, d)),
        ("epsilon", FcBlockSpec::new(d, h.epsilon, d)),
    ]
}

fn dwm_specs(cfg: &VlpmConfig) -> [(&'static str, FcBlockSpec); 3] {
    let d = cfg.out_dim();
    let h = &cfg.hidden;
    [
        ("theta", FcBlockSpec::new(d, h.theta, d)),
        ("zeta", FcBlockSpec::new(3, h.zeta, d)),
        ("eta", FcBlockSpec::new(3, h.eta, d)),
    ]
}

/// Registers `pam{s}.alpha..epsilon` per stage plus `dwm.theta/zeta/eta`.
pub fn register_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &VlpmConfig) -> Result<()> {
    cfg.validate()?;
    for stage in 1..=cfg.num_pam_stages {
        for (name, spec) in stage_specs(cfg, stage) {
            register_fc_block(store, &format!("pam{stage}.{name}"), spec)?;
        }
    }
    for (name, spec) in dwm_specs(cfg) {
        register_fc_block(store, &format!("dwm.{name}"), spec)?;
    }
    Ok(())
}

fn fc<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    store: &ParamStore<T>,
    prefix: &str,
    spec: FcBlockSpec,
) -> Result<NodeId> {
    g.fc_block(x, store, prefix, spec)
}

/// One point-attention stage over the real (un-padded) points of a
/// voxel. `coords` is `[n, 3]`, `feats` is `[n, d_in]`; returns `[n, d]`.
pub fn point_attention<T: Scalar>(
    g: &mut Graph<T>,
    coords: NodeId,
    feats: NodeId,
    store: &ParamStore<T>,
    cfg: &VlpmConfig,
    stage: usize,
) -> Result<NodeId> {
    let n = g.dims(coords)[0];
    if n == 0 {
        return Err(Error::Domain(
            "point_attention requires a non-empty voxel".into(),
        ));
    }
    if g.dims(coords).len() != 2 || g.dims(coords)[1] != 3 {
        return Err(Error::Shape {
            op: "point_attention",
            detail: format!("coords must be [n, 3], got {:?}", g.dims(coords)),
        });
    }
    let prefix = |name: &str| format!("pam{stage}.{name}");
    let specs = stage_specs(cfg, stage);
    let spec_of = |name: &str| specs.iter().find(|(n, _)| *n == name).unwrap().1;

    let q = fc(g, coords, store, &prefix("alpha"), spec_of("alpha"))?;
    let k = fc(g, coords, store, &prefix("beta"), spec_of("beta"))?;
    let v = fc(g, feats, store, &prefix("gamma"), spec_of("gamma"))?;

    // Pairwise coordinate differences c_i - c_j, laid out (i * n + j).
    let coord_vals = g.value(coords).clone();
    let mut diffs = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            for a in 0..3 {
                diffs.push(coord_vals.at2(i, a) - coord_vals.at2(j, a));
            }
        }
    }
    let diff_leaf = g.leaf(Tensor::new(alloc::vec![n * n, 3], diffs)?);
    let pos = fc(g, diff_leaf, store, &prefix("delta"), spec_of("delta"))?;

    // q_i - k_j + p_ij for every ordered pair.
    let i_index: Vec<usize> = (0..n).flat_map(|i| core::iter::repeat(i).take(n)).collect();
    let j_index: Vec<usize> = (0..n).flat_map(|_| 0..n).collect();
    let q_pairs = g.gather_rows(q, &i_index)?;
    let k_pairs = g.gather_rows(k, &j_index)?;
    let qk = g.sub(q_pairs, k_pairs)?;
    let attn_in = g.add(qk, pos)?;
    let mut weights = fc(g, attn_in, store, &prefix("epsilon"), spec_of("epsilon"))?;

    if cfg.normalize_pam_weights {
        // Per-channel softmax over j for each query point i.
        let d = cfg.feature_dim;
        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let rows = g.slice_rows(weights, i * n, n)?; // [n, d]
            let t = g.transpose(rows)?; // [d, n]
            let sm = g.softmax_last(t)?;
            let back = g.transpose(sm)?; // [n, d]
            blocks.push(back);
        }
        weights = g.concat_rows(&blocks)?;
        debug_assert_eq!(g.dims(weights), &[n * n, d]);
    }

    g.pair_sum(weights, v)
}

/// Dynamic per-point weighting; reduces `[n, d]` features to `[d]`
/// using weights derived from each point's offset to the voxel mean.
pub fn dynamic_weights<T: Scalar>(
    g: &mut Graph<T>,
    coords: NodeId,
    feats: NodeId,
    mean_coord: NodeId,
    store: &ParamStore<T>,
    cfg: &VlpmConfig,
) -> Result<NodeId> {
    let n = g.dims(coords)[0];
    if n == 0 {
        return Err(Error::Domain(
            "dynamic_weights requires a non-empty voxel".into(),
        ));
    }
    let d = g.dims(feats)[1];
    if g.dims(feats)[0] != n || d != cfg.out_dim() {
        return Err(Error::Shape {
            op: "dynamic_weights",
            detail: format!(
                "features {:?} vs {} points of width {}",
                g.dims(feats),
                n,
                cfg.out_dim()
            ),
        });
    }
    let specs = dwm_specs(cfg);
    let spec_of = |name: &str| specs.iter().find(|(s, _)| *s == name).unwrap().1;

    // zeta(mean) is evaluated once and broadcast to all points.
    let zeta = fc(g, mean_coord, store, "dwm.zeta", spec_of("zeta"))?;
    let zeta_rows = g.gather_rows(zeta, &alloc::vec![0; n])?;
    let eta = fc(g, coords, store, "dwm.eta", spec_of("eta"))?;
    let diff = g.sub(zeta_rows, eta)?;
    let w = fc(g, diff, store, "dwm.theta", spec_of("theta"))?;
    let weighted = g.mul(w, feats)?;
    g.sum_rows(weighted)
}

fn voxel_leaves<T: Scalar>(
    g: &mut Graph<T>,
    batch: &VoxelBatch,
    k: usize,
) -> Result<(NodeId, NodeId, NodeId)> {
    let n = batch.counts[k] as usize;
    let rows = batch.voxel_points(k);
    let mut coords = Vec::with_capacity(n * 3);
    let mut feats = Vec::with_capacity(n * POINT_CHANNELS);
    for i in 0..n {
        for a in 0..3 {
            coords.push(sc::<T>(rows[i * POINT_CHANNELS + a] as f64));
        }
        for a in 0..POINT_CHANNELS {
            feats.push(sc::<T>(rows[i * POINT_CHANNELS + a] as f64));
        }
    }
    let mean: Vec<T> = batch.means[k][..3]
        .iter()
        .map(|&m| sc::<T>(m as f64))
        .collect();
    Ok((
        g.leaf(Tensor::new(alloc::vec![n, 3], coords)?),
        g.leaf(Tensor::new(alloc::vec![n, POINT_CHANNELS], feats)?),
        g.leaf(Tensor::new(alloc::vec![1, 3], mean)?),
    ))
}

/// Builds the full module for voxel `k` of a batch: stacked attention
/// stages, then the dynamic-weights reduction. Returns a `[d]` node.
pub fn vlpm_voxel<T: Scalar>(
    g: &mut Graph<T>,
    batch: &VoxelBatch,
    k: usize,
    store: &ParamStore<T>,
    cfg: &VlpmConfig,
) -> Result<NodeId> {
    let (coords, raw, mean) = voxel_leaves(g, batch, k)?;
    let mut feats = raw;
    for stage in 1..=cfg.num_pam_stages {
        feats = point_attention(g, coords, feats, store, cfg, stage)?;
    }
    let reduced = if cfg.dwm_on_raw_points { raw } else { feats };
    dynamic_weights(g, coords, reduced, mean, store, cfg)
}

/// Per-voxel features `[k, d]` for a whole batch inside one graph
/// (training / gradient checking path). Padding rows never enter the
/// graph: only the `counts[k]` real points of each voxel are read.
pub fn vlpm_forward<T: Scalar>(
    g: &mut Graph<T>,
    batch: &VoxelBatch,
    store: &ParamStore<T>,
    cfg: &VlpmConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if batch.is_empty() {
        return Ok(g.leaf(Tensor::zeros(alloc::vec![0, cfg.out_dim()])));
    }
    let mut rows = Vec::with_capacity(batch.len());
    for k in 0..batch.len() {
        rows.push(vlpm_voxel(g, batch, k, store, cfg)?);
    }
    g.concat_rows(&rows)
}

/// Value-only forward that processes voxels in throwaway graphs, so
/// peak memory stays per-voxel. Voxels are independent; results are
/// gathered in batch order.
pub fn vlpm_features<T: Scalar>(
    batch: &VoxelBatch,
    store: &ParamStore<T>,
    cfg: &VlpmConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let d = cfg.out_dim();
    let mut data = Vec::with_capacity(batch.len() * d);
    for k in 0..batch.len() {
        let mut g = Graph::new();
        let out = vlpm_voxel(&mut g, batch, k, store, cfg)?;
        data.extend_from_slice(g.value(out).data());
    }
    Tensor::new(alloc::vec![batch.len(), d], data)
}

/// Parameter names used by this module, for reports.
pub fn param_prefixes(cfg: &VlpmConfig) -> Vec<String> {
    let mut out: Vec<String> = (1..=cfg.num_pam_stages)
        .map(|s| format!("pam{s}."))
        .collect();
    out.push("dwm.".into());
    out
}
