//! One-stage anchor head and its loss.
//!
//! Three 1x1 convolution branches over the fused map produce class
//! logits, 7-value box residuals and direction logits per anchor. The
//! loss combines a sigmoid focal classification term, smooth-L1 box
//! regression and a direction cross-entropy:
//! `total = cls + alpha * reg + beta * dir`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::RangeSpec;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::sigmoid;
use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};
use crate::synth::ObjectBox;
use crate::tensor::Tensor;

// Inherent float math is std-only; route through the trait otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Values per box residual: x, y, z, l, w, h, yaw.
pub const BOX_VALUES: usize = 7;
/// Direction bins (yaw >= 0 or not).
pub const DIR_BINS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AnchorConfig {
    /// Anchor box size (l, w, h) in meters.
    pub size_lwh: [f64; 3],
    /// Yaw hypotheses per cell.
    pub yaw_bins: Vec<f64>,
    /// Anchor center height.
    pub anchor_z: f64,
    pub classes: usize,
    /// IoU at or above which an anchor is positive.
    pub match_iou: f64,
    /// IoU at or below which an anchor is negative.
    pub ignore_iou: f64,
    /// Greedy NMS suppression threshold.
    pub nms_iou: f64,
    /// Minimum score for a decoded detection.
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            size_lwh: [3.9, 1.6, 1.56],
            yaw_bins: vec![0.0, core::f64::consts::FRAC_PI_2],
            anchor_z: -1.0,
            classes: 1,
            match_iou: 0.6,
            ignore_iou: 0.45,
            nms_iou: 0.5,
            score_threshold: 0.1,
            max_detections: 100,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.yaw_bins.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.yaw_bins.is_empty() {
            return Err(Error::Config("at least one yaw bin is required".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        if self.size_lwh.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("anchor size must be positive".into()));
        }
        let ok = self.match_iou > 0.0
            && self.match_iou < 1.0
            && self.ignore_iou > 0.0
            && self.ignore_iou < 1.0
            && self.match_iou > self.ignore_iou;
        if !ok {
            return Err(Error::Config(format!(
                "IoU thresholds must satisfy 0 < ignore {} < match {} < 1",
                self.ignore_iou, self.match_iou
            )));
        }
        Ok(())
    }
}

/// Loss weights and the classification/regression constants.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossWeights {
    /// Regression weight in the total.
    pub alpha: f64,
    /// Direction weight in the total.
    pub beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Transition point of the smooth-L1.
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 2.0,
            beta: 0.2,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }
}

/// A predefined box hypothesis at a BEV cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Anchor {
    pub fn diagonal(&self) -> f64 {
        (self.l * self.l + self.w * self.w).sqrt()
    }

    fn footprint(&self) -> Footprint {
        let (s, c) = (self.yaw.sin().abs(), self.yaw.cos().abs());
        Footprint {
            cx: self.x,
            cy: self.y,
            ex: (self.l * c + self.w * s) * 0.5,
            ey: (self.l * s + self.w * c) * 0.5,
        }
    }
}

/// Axis-aligned BEV rectangle (center plus half extents).
#[derive(Clone, Copy, Debug)]
struct Footprint {
    cx: f64,
    cy: f64,
    ex: f64,
    ey: f64,
}

fn footprint_of_box(b: &ObjectBox) -> Footprint {
    let (ex, ey) = b.bev_half_extents();
    Footprint {
        cx: b.center[0],
        cy: b.center[1],
        ex,
        ey,
    }
}

fn aabb_iou(a: &Footprint, b: &Footprint) -> f64 {
    let ix = (a.cx + a.ex).min(b.cx + b.ex) - (a.cx - a.ex).max(b.cx - b.ex);
    let iy = (a.cy + a.ey).min(b.cy + b.ey) - (a.cy - a.ey).max(b.cy - b.ey);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = 4.0 * a.ex * a.ey + 4.0 * b.ex * b.ey - inter;
    inter / union
}

/// Axis-aligned BEV IoU between an anchor and a ground-truth box.
pub fn anchor_gt_iou(anchor: &Anchor, gt: &ObjectBox) -> f64 {
    aabb_iou(&anchor.footprint(), &footprint_of_box(gt))
}

/// Anchors for an `(h, w)` BEV feature grid over the range, cell-major
/// with yaw bins innermost.
pub fn generate_anchors(
    cfg: &AnchorConfig,
    range: &RangeSpec,
    grid_hw: (usize, usize),
) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    range.validate()?;
    let (h, w) = grid_hw;
    if h == 0 || w == 0 {
        return Err(Error::Config("anchor grid must be non-empty".into()));
    }
    let cell_y = range.extent(1) / h as f64;
    let cell_x = range.extent(0) / w as f64;
    let mut anchors = Vec::with_capacity(h * w * cfg.yaw_bins.len());
    for iy in 0..h {
        for ix in 0..w {
            for &yaw in &cfg.yaw_bins {
                anchors.push(Anchor {
                    x: range.x[0] + (ix as f64 + 0.5) * cell_x,
                    y: range.y[0] + (iy as f64 + 0.5) * cell_y,
                    z: cfg.anchor_z,
                    l: cfg.size_lwh[0],
                    w: cfg.size_lwh[1],
                    h: cfg.size_lwh[2],
                    yaw,
                });
            }
        }
    }
    Ok(anchors)
}

/// Assignment of one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Positive {
        gt: usize,
        residual: [f64; BOX_VALUES],
        dir_bin: usize,
    },
    Negative,
    Ignored,
}

#[derive(Clone, Debug)]
pub struct Targets {
    pub labels: Vec<AnchorLabel>,
    pub num_positive: usize,
}

/// Wraps an angle difference into `[-pi/2, pi/2)`. Box footprints are
/// pi-symmetric, so regression only needs the wrapped residual; the
/// direction bin carries the remaining half-turn.
pub fn wrap_half_pi(d: f64) -> f64 {
    let shifted = d + core::f64::consts::FRAC_PI_2;
    let mut r = shifted % core::f64::consts::PI;
    if r < 0.0 {
        r += core::f64::consts::PI;
    }
    r - core::f64::consts::FRAC_PI_2
}

/// Diagonal-normalized residual encoding between an anchor and its box.
pub fn encode_residual(anchor: &Anchor, gt: &ObjectBox) -> [f64; BOX_VALUES] {
    let d = anchor.diagonal();
    [
        (gt.center[0] - anchor.x) / d,
        (gt.center[1] - anchor.y) / d,
        (gt.center[2] - anchor.z) / anchor.h,
        (gt.size[0] / anchor.l).ln(),
        (gt.size[1] / anchor.w).ln(),
        (gt.size[2] / anchor.h).ln(),
        wrap_half_pi(gt.yaw - anchor.yaw),
    ]
}

/// Inverse of [`encode_residual`].
pub fn decode_residual(anchor: &Anchor, r: &[f64]) -> ObjectBox {
    let d = anchor.diagonal();
    ObjectBox {
        center: [
            anchor.x + r[0] * d,
            anchor.y + r[1] * d,
            anchor.z + r[2] * anchor.h,
        ],
        size: [
            anchor.l * r[3].exp(),
            anchor.w * r[4].exp(),
            anchor.h * r[5].exp(),
        ],
        yaw: anchor.yaw + r[6],
        class_id: 0,
    }
}

/// Matches anchors to ground truth by axis-aligned BEV IoU.
///
/// IoU >= `match_iou` makes an anchor positive for its best box (ties
/// keep the lowest box index); IoU <= `ignore_iou` makes it negative;
/// anything between is ignored. Every box additionally forces its
/// best-IoU anchor positive (ties keep the lowest anchor index).
pub fn assign_targets(
    anchors: &[Anchor],
    gts: &[ObjectBox],
    cfg: &AnchorConfig,
) -> Result<Targets> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::Config("no anchors to assign".into()));
    }
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(Targets {
            labels,
            num_positive: 0,
        });
    }

    let mut best_gt = vec![(0usize, 0.0f64); anchors.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best = (0usize, -1.0f64);
        for (gi, gt) in gts.iter().enumerate() {
            let iou = anchor_gt_iou(anchor, gt);
            if iou > best.1 {
                best = (gi, iou);
            }
        }
        best_gt[ai] = (best.0, best.1.max(0.0));
        labels[ai] = if best.1 >= cfg.match_iou {
            AnchorLabel::Positive {
                gt: best.0,
                residual: encode_residual(anchor, &gts[best.0]),
                dir_bin: (gts[best.0].yaw >= 0.0) as usize,
            }
        } else if best.1 <= cfg.ignore_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignored
        };
    }

    // Force-match: every box claims its best anchor. If a forced anchor
    // is already positive, the higher-IoU box keeps it.
    for (gi, gt) in gts.iter().enumerate() {
        let mut best = (0usize, -1.0f64);
        for (ai, anchor) in anchors.iter().enumerate() {
            let iou = anchor_gt_iou(anchor, gt);
            if iou > best.1 {
                best = (ai, iou);
            }
        }
        let ai = best.0;
        let claim = match labels[ai] {
            AnchorLabel::Positive { gt: cur, .. } => best.1 > best_gt[ai].1 && cur != gi,
            _ => true,
        };
        if claim {
            labels[ai] = AnchorLabel::Positive {
                gt: gi,
                residual: encode_residual(&anchors[ai], gt),
                dir_bin: (gt.yaw >= 0.0) as usize,
            };
            best_gt[ai] = (gi, best.1);
        }
    }

    let num_positive = labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
        .count();
    Ok(Targets {
        labels,
        num_positive,
    })
}

/// The three head branches, each `[channels, h, w]`.
pub struct HeadNodes {
    pub cls: NodeId,
    pub boxes: NodeId,
    pub dir: NodeId,
}

/// Registers the three 1x1 convolution branches.
pub fn register_params<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &AnchorConfig,
    channels: usize,
) -> Result<()> {
    cfg.validate()?;
    let a = cfg.anchors_per_cell();
    for (name, out) in [
        ("cls", a * cfg.classes),
        ("box", a * BOX_VALUES),
        ("dir", a * DIR_BINS),
    ] {
        store.register_weight(
            &format!("head.{name}.w"),
            vec![out, channels, 1, 1],
            channels,
        )?;
        store.register_zeros(&format!("head.{name}.b"), vec![out])?;
    }
    Ok(())
}

/// Runs the three branches over the fused map.
pub fn head_forward<T: Scalar>(
    g: &mut Graph<T>,
    fused: NodeId,
    store: &ParamStore<T>,
    cfg: &AnchorConfig,
) -> Result<HeadNodes> {
    cfg.validate()?;
    let branch = |name: &str, g: &mut Graph<T>| -> Result<NodeId> {
        let w = g.param(store, &format!("head.{name}.w"))?;
        let b = g.param(store, &format!("head.{name}.b"))?;
        g.conv2d(fused, w, Some(b), 1, 0)
    };
    Ok(HeadNodes {
        cls: branch("cls", g)?,
        boxes: branch("box", g)?,
        dir: branch("dir", g)?,
    })
}

/// Reorders a `[a * vals, h, w]` branch into anchor-major rows
/// `[h * w * a, vals]`, matching the anchor enumeration order.
fn branch_rows<T: Scalar>(
    g: &mut Graph<T>,
    branch: NodeId,
    a: usize,
    vals: usize,
) -> Result<NodeId> {
    let d = g.dims(branch).to_vec();
    let (h, w) = (d[1], d[2]);
    let flat = g.reshape(branch, vec![a * vals, h * w])?;
    let cells = g.transpose(flat)?; // [h*w, a*vals]
    g.reshape(cells, vec![h * w * a, vals])
}

/// Loss nodes; `total = cls + alpha * reg + beta * dir`.
pub struct LossNodes {
    pub total: NodeId,
    pub cls: NodeId,
    pub reg: NodeId,
    pub dir: NodeId,
}

/// The exact total composition used by the loss, callable with plain
/// numbers for verification.
pub fn compose_total(cls: f64, reg: f64, dir: f64, w: &LossWeights) -> f64 {
    (cls + w.alpha * reg) + w.beta * dir
}

/// Graph-side twin of [`compose_total`]; `rpn_loss` builds its total
/// through this, so injected component nodes exercise the same
/// arithmetic.
pub fn compose_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    cls: NodeId,
    reg: NodeId,
    dir: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let reg_w = g.scale(reg, sc::<T>(w.alpha));
    let dir_w = g.scale(dir, sc::<T>(w.beta));
    let partial = g.add(cls, reg_w)?;
    g.add(partial, dir_w)
}

/// Builds the anchor loss over the head outputs.
///
/// Classification is a sigmoid focal loss over positive and negative
/// anchors (ignored anchors masked out), regression a smooth-L1 over
/// the positive anchors' residuals, direction a cross-entropy over the
/// positive anchors' bins; each term is normalized by the positive
/// count (at least one).
pub fn rpn_loss<T: Scalar>(
    g: &mut Graph<T>,
    head: &HeadNodes,
    targets: &Targets,
    cfg: &AnchorConfig,
    weights: &LossWeights,
) -> Result<LossNodes> {
    weights.validate()?;
    let a = cfg.anchors_per_cell();
    let n_anchors = targets.labels.len();

    let cls_rows = branch_rows(g, head.cls, a, cfg.classes)?;
    let box_rows = branch_rows(g, head.boxes, a, BOX_VALUES)?;
    let dir_rows = branch_rows(g, head.dir, a, DIR_BINS)?;
    if g.dims(cls_rows)[0] != n_anchors {
        return Err(Error::Shape {
            op: "rpn_loss",
            detail: format!(
                "head yields {} anchors, targets have {}",
                g.dims(cls_rows)[0],
                n_anchors
            ),
        });
    }

    // Per-anchor-per-class binary targets and the ignore mask.
    let mut cls_targets = vec![0u8; n_anchors * cfg.classes];
    let mut mask = vec![T::one(); n_anchors * cfg.classes];
    let mut positive_rows = Vec::new();
    let mut residuals: Vec<T> = Vec::new();
    let mut dir_labels = Vec::new();
    for (ai, label) in targets.labels.iter().enumerate() {
        match label {
            AnchorLabel::Positive {
                gt,
                residual,
                dir_bin,
            } => {
                let _ = gt;
                cls_targets[ai * cfg.classes] = 1;
                positive_rows.push(ai);
                residuals.extend(residual.iter().map(|r| sc::<T>(*r)));
                dir_labels.push(*dir_bin);
            }
            AnchorLabel::Negative => {}
            AnchorLabel::Ignored => {
                for c in 0..cfg.classes {
                    mask[ai * cfg.classes + c] = T::zero();
                }
            }
        }
    }
    let norm = sc::<T>(1.0 / targets.num_positive.max(1) as f64);

    let cls_flat = g.reshape(cls_rows, vec![n_anchors * cfg.classes])?;
    let focal = g.focal_loss(
        cls_flat,
        &cls_targets,
        sc::<T>(weights.focal_alpha),
        sc::<T>(weights.focal_gamma),
    )?;
    let mask_leaf = g.leaf(Tensor::new(vec![n_anchors * cfg.classes], mask)?);
    let masked = g.mul(focal, mask_leaf)?;
    let cls_sum = g.sum_all(masked);
    let cls = g.scale(cls_sum, norm);

    let pos_boxes = g.gather_rows(box_rows, &positive_rows)?;
    let reg_elems = g.smooth_l1(pos_boxes, &residuals, sc::<T>(weights.smooth_l1_beta))?;
    let reg_sum = g.sum_all(reg_elems);
    let reg = g.scale(reg_sum, norm);

    let pos_dirs = g.gather_rows(dir_rows, &positive_rows)?;
    let dir_elems = g.cross_entropy_rows(pos_dirs, &dir_labels)?;
    let dir_sum = g.sum_all(dir_elems);
    let dir = g.scale(dir_sum, norm);

    let total = compose_loss_nodes(g, cls, reg, dir, weights)?;
    Ok(LossNodes {
        total,
        cls,
        reg,
        dir,
    })
}

/// A decoded detection.
#[derive(Clone, Debug)]
pub struct Detection {
    pub boxed: ObjectBox,
    pub score: f64,
    pub class: usize,
}

/// Decodes per-anchor head outputs into scored boxes (no suppression).
pub fn decode_detections<T: Scalar>(
    cls: &Tensor<T>,
    boxes: &Tensor<T>,
    dir: &Tensor<T>,
    anchors: &[Anchor],
    cfg: &AnchorConfig,
) -> Vec<Detection> {
    let a = cfg.anchors_per_cell();
    let (h, w) = (cls.dims()[1], cls.dims()[2]);
    let cells = h * w;
    let mut dets = Vec::new();
    for cell in 0..cells {
        let (cy, cx) = (cell / w, cell % w);
        for bin in 0..a {
            let ai = cell * a + bin;
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..cfg.classes {
                let logit = cls.at3(bin * cfg.classes + c, cy, cx).to_f64().unwrap();
                if logit > best.1 {
                    best = (c, logit);
                }
            }
            let score = sigmoid(best.1);
            if score < cfg.score_threshold {
                continue;
            }
            let r: Vec<f64> = (0..BOX_VALUES)
                .map(|i| boxes.at3(bin * BOX_VALUES + i, cy, cx).to_f64().unwrap())
                .collect();
            let mut decoded = decode_residual(&anchors[ai], &r);
            let d0 = dir.at3(bin * DIR_BINS, cy, cx).to_f64().unwrap();
            let d1 = dir.at3(bin * DIR_BINS + 1, cy, cx).to_f64().unwrap();
            let positive_bin = d1 > d0;
            if positive_bin != (decoded.yaw >= 0.0) {
                decoded.yaw += if decoded.yaw < 0.0 {
                    core::f64::consts::PI
                } else {
                    -core::f64::consts::PI
                };
            }
            dets.push(Detection {
                boxed: decoded,
                score,
                class: best.0,
            });
        }
    }
    dets.sort_by(|x, y| y.score.total_cmp(&x.score));
    dets.truncate(cfg.max_detections);
    dets
}

/// Greedy BEV NMS over score-sorted detections.
pub fn greedy_nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|x, y| y.score.total_cmp(&x.score));
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for d in dets {
        let fd = footprint_of_box(&d.boxed);
        for k in &keep {
            if aabb_iou(&fd, &footprint_of_box(&k.boxed)) >= iou_threshold {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

/// Fraction of ground-truth boxes matched by a detection at the IoU
/// threshold.
pub fn recall_at_iou(gts: &[ObjectBox], dets: &[Detection], iou_threshold: f64) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    let hit = gts
        .iter()
        .filter(|gt| {
            dets.iter().any(|d| {
                aabb_iou(&footprint_of_box(&d.boxed), &footprint_of_box(gt)) >= iou_threshold
            })
        })
        .count();
    hit as f64 / gts.len() as f64
}
