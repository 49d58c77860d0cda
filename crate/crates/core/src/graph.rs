//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape: every operation records its
//! parents, so node ids are already topologically ordered and the
//! backward sweep is a single reverse pass. Parameters enter the tape
//! through [`Graph::param`], which remembers the binding so
//! [`Graph::backward`] can accumulate gradients into the owning
//! [`ParamStore`].
//!
//! Tensors are immutable once produced; a graph is single-threaded, but
//! distinct graphs over distinct stores may run concurrently.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{FcBlockSpec, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Transpose(NodeId),
    SoftmaxLast(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    PairSum {
        w: NodeId,
        v: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    AvgPool(NodeId),
    Upsample(NodeId),
    ScatterMax {
        feats: NodeId,
        winners: Vec<i64>,
    },
    FocalLoss {
        logits: NodeId,
        targets: Vec<u8>,
        alpha: T,
        gamma: T,
    },
    SmoothL1 {
        pred: NodeId,
        target: Vec<T>,
        beta: T,
    },
    CrossEntropyRows {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape over [`Tensor`] values.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bindings: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a constant input (no gradient flows into it).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter from the store; repeated binds of the
    /// same name reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bindings.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Leaf, true);
        self.bindings.insert(name.to_string(), id);
        Ok(id)
    }

    // ---- element-wise and matrix ops -------------------------------------

    fn binary_same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape {
                op,
                detail: format!("lhs {:?} vs rhs {:?}", self.dims(a), self.dims(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_dims("add", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let dims = self.dims(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(dims, data)?, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_dims("sub", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let dims = self.dims(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(dims, data)?, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_dims("mul", a, b)?;
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let dims = self.dims(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(dims, data)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let data: Vec<T> = self.value(x).data().iter().map(|v| *v * c).collect();
        let dims = self.dims(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(dims, data).unwrap(), Op::Scale(x, c), needs)
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let dims = self.dims(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(dims, data).unwrap(), Op::Relu(x), needs)
    }

    /// `y[n,o] = x[n,i] * w[o,i]^T + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("input {:?} vs weight {:?}", xd, wd),
            });
        }
        let (n, i, o) = (xd[0], xd[1], wd[0]);
        if let Some(bias) = b {
            let bd = self.dims(bias);
            if bd != [o] {
                return Err(Error::Shape {
                    op: "linear",
                    detail: format!("bias {:?} vs weight {:?}", bd, wd),
                });
            }
        }
        let data = kernels::linear(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bb| self.value(bb).data()),
            n,
            i,
            o,
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![n, o], data)?,
            Op::Linear { x, w, b },
            needs,
        ))
    }

    /// Two linear layers with a ReLU between them, parameters
    /// `{prefix}.w1/b1/w2/b2` from the store.
    pub fn fc_block(
        &mut self,
        x: NodeId,
        store: &ParamStore<T>,
        prefix: &str,
        spec: FcBlockSpec,
    ) -> Result<NodeId> {
        spec.validate()?;
        let w1 = self.param(store, &format!("{prefix}.w1"))?;
        let w2 = self.param(store, &format!("{prefix}.w2"))?;
        let (b1, b2) = if spec.bias {
            (
                Some(self.param(store, &format!("{prefix}.b1"))?),
                Some(self.param(store, &format!("{prefix}.b2"))?),
            )
        } else {
            (None, None)
        };
        if self.dims(w1) != [spec.hidden_dim, spec.in_dim]
            || self.dims(w2) != [spec.out_dim, spec.hidden_dim]
        {
            return Err(Error::Shape {
                op: "fc_block",
                detail: format!(
                    "{prefix}: stored w1 {:?} / w2 {:?} do not match spec {}x{}x{}",
                    self.dims(w1),
                    self.dims(w2),
                    spec.in_dim,
                    spec.hidden_dim,
                    spec.out_dim
                ),
            });
        }
        let h = self.linear(x, w1, b1)?;
        let h = self.relu(h);
        self.linear(h, w2, b2)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a[n,k] * b[m,k]^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        let ok = ad.len() == 2
            && bd.len() == 2
            && if trans_b {
                ad[1] == bd[1]
            } else {
                ad[1] == bd[0]
            };
        if !ok {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("lhs {:?} vs rhs {:?} (trans_b={})", ad, bd, trans_b),
            });
        }
        let (n, k) = (ad[0], ad[1]);
        let m = if trans_b { bd[0] } else { bd[1] };
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m, trans_b);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![n, m], data)?,
            Op::MatMul { a, b, trans_b },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xd = self.dims(x);
        if xd.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", xd),
            });
        }
        let (n, m) = (xd[0], xd[1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Transpose(x), needs))
    }

    /// Softmax over the last axis, computed with max subtraction.
    /// Non-finite inputs are rejected.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let xd = self.dims(x).to_vec();
        if xd.is_empty() || *xd.last().unwrap() == 0 {
            return Err(Error::Shape {
                op: "softmax",
                detail: format!("last axis must be non-empty, got {:?}", xd),
            });
        }
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let m = *xd.last().unwrap();
        let rows = self.value(x).numel() / m;
        let data = kernels::softmax_rows(self.value(x).data(), rows, m);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xd, data)?, Op::SoftmaxLast(x), needs))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, v| acc + *v);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// `[n, d] -> [d]`, summing over rows.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xd = self.dims(x);
        if xd.len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                detail: format!("expected rank 2, got {:?}", xd),
            });
        }
        let (n, d) = (xd[0], xd[1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                data[j] += src[i * d + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![d], data)?, Op::SumRows(x), needs))
    }

    /// Vertically concatenates blocks of equal width; rank-1 blocks are
    /// treated as single rows.
    pub fn concat_rows(&mut self, blocks: &[NodeId]) -> Result<NodeId> {
        if blocks.is_empty() {
            return Err(Error::Shape {
                op: "concat_rows",
                detail: "no blocks given".into(),
            });
        }
        let width = self.block_width(blocks[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &b in blocks {
            if self.block_width(b) != width {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!(
                        "block widths differ: {} vs {:?}",
                        width,
                        self.dims(b)
                    ),
                });
            }
            rows += self.block_rows(b);
            data.extend_from_slice(self.value(b).data());
        }
        let needs = blocks.iter().any(|&b| self.needs(b));
        Ok(self.push(
            Tensor::new(vec![rows, width], data)?,
            Op::ConcatRows(blocks.to_vec()),
            needs,
        ))
    }

    fn block_width(&self, id: NodeId) -> usize {
        let d = self.dims(id);
        if d.len() == 1 {
            d[0]
        } else {
            d[1]
        }
    }

    fn block_rows(&self, id: NodeId) -> usize {
        let d = self.dims(id);
        if d.len() == 1 {
            1
        } else {
            d[0]
        }
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let xd = self.dims(x);
        if xd.len() != 2 || start + rows > xd[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("slice [{start}, {}) of {:?}", start + rows, xd),
            });
        }
        let d = xd[1];
        let data = self.value(x).data()[start * d..(start + rows) * d].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::SliceRows { x, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let n: usize = dims.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.dims(x), dims),
            });
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(dims, data)?, Op::Reshape(x), needs))
    }

    /// Picks rows of `x` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xd = self.dims(x);
        if xd.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("expected rank 2, got {:?}", xd),
            });
        }
        let (n, d) = (xd[0], xd[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of {n}"),
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Pairwise weighted sum: `out[i, c] = sum_j w[i*m + j, c] * v[j, c]`
    /// for `w: [n*m, d]`, `v: [m, d]`.
    pub fn pair_sum(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (wd, vd) = (self.dims(w), self.dims(v));
        let ok = wd.len() == 2 && vd.len() == 2 && wd[1] == vd[1] && vd[0] > 0
            && wd[0] % vd[0] == 0;
        if !ok {
            return Err(Error::Shape {
                op: "pair_sum",
                detail: format!("weights {:?} vs values {:?}", wd, vd),
            });
        }
        let (m, d) = (vd[0], vd[1]);
        let n = wd[0] / m;
        let (ws, vs) = (self.value(w).data(), self.value(v).data());
        let mut data = vec![T::zero(); n * d];
        for i in 0..n {
            for j in 0..m {
                for c in 0..d {
                    data[i * d + c] += ws[(i * m + j) * d + c] * vs[j * d + c];
                }
            }
        }
        let needs = self.needs(w) || self.needs(v);
        Ok(self.push(Tensor::new(vec![n, d], data)?, Op::PairSum { w, v }, needs))
    }

    // ---- spatial ops ------------------------------------------------------

    /// 2D convolution over `x: [ci, h, w]` with `w: [co, ci, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w).to_vec());
        if xd.len() != 3 || wd.len() != 4 || xd[0] != wd[1] || stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input {:?} vs kernel {:?} (stride {stride})", xd, wd),
            });
        }
        let (ci, h, ww) = (xd[0], xd[1], xd[2]);
        let (co, kh, kw) = (wd[0], wd[2], wd[3]);
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(ww, kw, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("kernel {:?} does not fit input {:?}", wd, xd),
                })
            }
        };
        if let Some(bias) = b {
            if self.dims(bias) != [co] {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("bias {:?} vs kernel {:?}", self.dims(bias), wd),
                });
            }
        }
        let data = kernels::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|bb| self.value(bb).data()),
            ci,
            h,
            ww,
            co,
            kh,
            kw,
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![co, oh, ow], data)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Adaptive average pooling of `[c, h, w]` to `out_hw`. Each output
    /// cell averages a contiguous window; windows tile the input. If the
    /// output is larger than the input on either axis the operation
    /// falls back to bilinear resizing.
    pub fn avg_pool2d(&mut self, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId> {
        let xd = self.dims(x);
        if xd.len() != 3 {
            return Err(Error::Shape {
                op: "avg_pool2d",
                detail: format!("expected [c, h, w], got {:?}", xd),
            });
        }
        if out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::Config(format!(
                "avg_pool2d: zero-sized output {:?} requested",
                out_hw
            )));
        }
        let (h, w) = (xd[1], xd[2]);
        if out_hw.0 > h || out_hw.1 > w {
            return self.upsample2d(x, out_hw);
        }
        let c = xd[0];
        let data = kernels::avg_pool(self.value(x).data(), c, h, w, out_hw.0, out_hw.1);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, out_hw.0, out_hw.1], data)?,
            Op::AvgPool(x),
            needs,
        ))
    }

    /// Bilinear resize of `[c, h, w]` to `out_hw` (corner alignment
    /// disabled); constant maps stay constant.
    pub fn upsample2d(&mut self, x: NodeId, out_hw: (usize, usize)) -> Result<NodeId> {
        let xd = self.dims(x);
        if xd.len() != 3 {
            return Err(Error::Shape {
                op: "upsample2d",
                detail: format!("expected [c, h, w], got {:?}", xd),
            });
        }
        if out_hw.0 == 0 || out_hw.1 == 0 {
            return Err(Error::Config(format!(
                "upsample2d: zero-sized target {:?} requested",
                out_hw
            )));
        }
        let (c, h, w) = (xd[0], xd[1], xd[2]);
        let data = kernels::bilinear_resize(self.value(x).data(), c, h, w, out_hw.0, out_hw.1);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, out_hw.0, out_hw.1], data)?,
            Op::Upsample(x),
            needs,
        ))
    }

    /// Scatters per-voxel features `[k, c]` onto a BEV grid
    /// `[c, gy, gx]`; cells shared by several voxels (different z
    /// levels) keep the element-wise maximum, untouched cells are zero.
    pub fn scatter_bev_max(
        &mut self,
        feats: NodeId,
        cells: &[usize],
        grid_hw: (usize, usize),
    ) -> Result<NodeId> {
        let fd = self.dims(feats);
        if fd.len() != 2 || fd[0] != cells.len() {
            return Err(Error::Shape {
                op: "scatter_bev_max",
                detail: format!("features {:?} vs {} cells", fd, cells.len()),
            });
        }
        let (gy, gx) = grid_hw;
        let area = gy * gx;
        if let Some(&bad) = cells.iter().find(|&&c| c >= area) {
            return Err(Error::Domain(format!(
                "scatter_bev_max: cell {bad} outside {gy}x{gx} grid"
            )));
        }
        let (k, c) = (fd[0], fd[1]);
        let (data, winners) = kernels::scatter_max(self.value(feats).data(), cells, k, c, gy, gx);
        let needs = self.needs(feats);
        Ok(self.push(
            Tensor::new(vec![c, gy, gx], data)?,
            Op::ScatterMax { feats, winners },
            needs,
        ))
    }

    // ---- loss ops ----------------------------------------------------------

    /// Per-element sigmoid focal loss for binary targets.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: &[u8],
        alpha: T,
        gamma: T,
    ) -> Result<NodeId> {
        if self.value(logits).numel() != targets.len() {
            return Err(Error::Shape {
                op: "focal_loss",
                detail: format!(
                    "logits {:?} vs {} targets",
                    self.dims(logits),
                    targets.len()
                ),
            });
        }
        let one = T::one();
        let data: Vec<T> = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let p = kernels::sigmoid(x);
                if t == 1 {
                    // -alpha * (1-p)^gamma * ln p
                    let ln_p = -kernels::softplus(-x);
                    -alpha * (one - p).powf(gamma) * ln_p
                } else {
                    // -(1-alpha) * p^gamma * ln(1-p)
                    let ln_q = -kernels::softplus(x);
                    -(one - alpha) * p.powf(gamma) * ln_q
                }
            })
            .collect();
        let dims = self.dims(logits).to_vec();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(dims, data)?,
            Op::FocalLoss {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            needs,
        ))
    }

    /// Per-element smooth-L1 against a constant target.
    pub fn smooth_l1(&mut self, pred: NodeId, target: &[T], beta: T) -> Result<NodeId> {
        if self.value(pred).numel() != target.len() {
            return Err(Error::Shape {
                op: "smooth_l1",
                detail: format!("pred {:?} vs {} targets", self.dims(pred), target.len()),
            });
        }
        if beta <= T::zero() {
            return Err(Error::Config("smooth_l1: beta must be > 0".into()));
        }
        let half = sc::<T>(0.5);
        let data: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .collect();
        let dims = self.dims(pred).to_vec();
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::new(dims, data)?,
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                beta,
            },
            needs,
        ))
    }

    /// Per-row softmax cross-entropy against integer labels.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ld = self.dims(logits);
        if ld.len() != 2 || ld[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} labels", ld, labels.len()),
            });
        }
        let (n, c) = (ld[0], ld[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape {
                op: "cross_entropy",
                detail: format!("label {bad} out of {c} classes"),
            });
        }
        let src = self.value(logits).data();
        let mut data = vec![T::zero(); n];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for &v in row {
                sum += (v - mx).exp();
            }
            data[i] = mx + sum.ln() - row[labels[i]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::new(vec![n], data)?,
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Runs the reverse sweep from a scalar node and accumulates
    /// parameter gradients into the store.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward_grads(loss)?;
        for (name, id) in &self.bindings {
            if let Some(g) = &grads[id.0] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn backward_grads(&self, loss: NodeId) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.dims(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let (head, tail) = grads.split_at_mut(id);
            let g = tail[0].as_ref().unwrap();
            self.backprop_node(id, g, head);
        }
        Ok(grads)
    }

    /// Propagates the gradient of node `id` into `grads[parent]` slots
    /// (all parents have smaller indices).
    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<T>>], target: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !self.needs(target) {
                return;
            }
            let slot = &mut grads[target.0];
            if slot.is_none() {
                *slot = Some(vec![T::zero(); self.value(target).numel()]);
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += *gv;
                    }
                });
                acc(grads, *b, &mut |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += *gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += *gv;
                    }
                });
                acc(grads, *b, &mut |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= *gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                acc(grads, *x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += *gv * *c;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(grads, *x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > T::zero() {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xd = self.dims(*x);
                let (n, i) = (xd[0], xd[1]);
                let o = self.dims(*w)[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(grads, *x, &mut |dx| {
                    // dx[n,i] += g[n,o] * w[o,i]
                    for r in 0..n {
                        for c in 0..o {
                            let gv = g[r * o + c];
                            for p in 0..i {
                                dx[r * i + p] += gv * wv[c * i + p];
                            }
                        }
                    }
                });
                acc(grads, *w, &mut |dw| {
                    // dw[o,i] += g^T[o,n] * x[n,i]
                    for c in 0..o {
                        for r in 0..n {
                            let gv = g[r * o + c];
                            for p in 0..i {
                                dw[c * i + p] += gv * xv[r * i + p];
                            }
                        }
                    }
                });
                if let Some(bias) = b {
                    acc(grads, *bias, &mut |db| {
                        for r in 0..n {
                            for c in 0..o {
                                db[c] += g[r * o + c];
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let ad = self.dims(*a);
                let (n, k) = (ad[0], ad[1]);
                let m = node.value.dims()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if *trans_b {
                    // y = a * b^T with b [m,k]
                    acc(grads, *a, &mut |da| {
                        // da[n,k] += g[n,m] * b[m,k]
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                for p in 0..k {
                                    da[i * k + p] += gv * bv[j * k + p];
                                }
                            }
                        }
                    });
                    acc(grads, *b, &mut |db| {
                        // db[m,k] += g^T[m,n] * a[n,k]
                        for j in 0..m {
                            for i in 0..n {
                                let gv = g[i * m + j];
                                for p in 0..k {
                                    db[j * k + p] += gv * av[i * k + p];
                                }
                            }
                        }
                    });
                } else {
                    acc(grads, *a, &mut |da| {
                        // da[n,k] += g[n,m] * b^T[m,k]
                        for i in 0..n {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..m {
                                    s += g[i * m + j] * bv[p * m + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                    acc(grads, *b, &mut |db| {
                        // db[k,m] += a^T[k,n] * g[n,m]
                        for p in 0..k {
                            for j in 0..m {
                                let mut s = T::zero();
                                for i in 0..n {
                                    s += av[i * k + p] * g[i * m + j];
                                }
                                db[p * m + j] += s;
                            }
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.dims()[0], node.value.dims()[1]);
                acc(grads, *x, &mut |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let dims = node.value.dims();
                let m = *dims.last().unwrap();
                let rows = node.value.numel() / m;
                let dx = kernels::softmax_rows_backward(node.value.data(), g, rows, m);
                acc(grads, *x, &mut |dst| {
                    for (d, v) in dst.iter_mut().zip(&dx) {
                        *d += *v;
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                acc(grads, *x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumRows(x) => {
                let d = node.value.numel();
                let n = self.value(*x).numel() / d;
                acc(grads, *x, &mut |dx| {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] += g[j];
                        }
                    }
                });
            }
            Op::ConcatRows(blocks) => {
                let mut offset = 0;
                for &b in blocks {
                    let len = self.value(b).numel();
                    acc(grads, b, &mut |db| {
                        for (d, gv) in db.iter_mut().zip(&g[offset..offset + len]) {
                            *d += *gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = node.value.dims()[1];
                let offset = start * d;
                acc(grads, *x, &mut |dx| {
                    for (i, gv) in g.iter().enumerate() {
                        dx[offset + i] += *gv;
                    }
                });
            }
            Op::Reshape(x) => {
                acc(grads, *x, &mut |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += *gv;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = node.value.dims()[1];
                acc(grads, *x, &mut |dx| {
                    for (pos, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[pos * d + j];
                        }
                    }
                });
            }
            Op::PairSum { w, v } => {
                let (wv, vv) = (self.value(*w).data(), self.value(*v).data());
                let vd = self.dims(*v);
                let (m, d) = (vd[0], vd[1]);
                let n = self.dims(*w)[0] / m;
                acc(grads, *w, &mut |dw| {
                    for i in 0..n {
                        for j in 0..m {
                            for c in 0..d {
                                dw[(i * m + j) * d + c] += g[i * d + c] * vv[j * d + c];
                            }
                        }
                    }
                });
                acc(grads, *v, &mut |dv| {
                    for i in 0..n {
                        for j in 0..m {
                            for c in 0..d {
                                dv[j * d + c] += g[i * d + c] * wv[(i * m + j) * d + c];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xd = self.dims(*x);
                let wd = self.dims(*w);
                let (ci, h, ww) = (xd[0], xd[1], xd[2]);
                let (co, kh, kw) = (wd[0], wd[2], wd[3]);
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    ci,
                    h,
                    ww,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad,
                );
                acc(grads, *x, &mut |dst| {
                    for (d, v) in dst.iter_mut().zip(&dx) {
                        *d += *v;
                    }
                });
                acc(grads, *w, &mut |dst| {
                    for (d, v) in dst.iter_mut().zip(&dw) {
                        *d += *v;
                    }
                });
                if let Some(bias) = b {
                    acc(grads, *bias, &mut |dst| {
                        for (d, v) in dst.iter_mut().zip(&db) {
                            *d += *v;
                        }
                    });
                }
            }
            Op::AvgPool(x) => {
                let xd = self.dims(*x);
                let od = node.value.dims();
                let dx = kernels::avg_pool_backward(g, xd[0], xd[1], xd[2], od[1], od[2]);
                acc(grads, *x, &mut |dst| {
                    for (d, v) in dst.iter_mut().zip(&dx) {
                        *d += *v;
                    }
                });
            }
            Op::Upsample(x) => {
                let xd = self.dims(*x);
                let od = node.value.dims();
                let dx = kernels::bilinear_resize_backward(g, xd[0], xd[1], xd[2], od[1], od[2]);
                acc(grads, *x, &mut |dst| {
                    for (d, v) in dst.iter_mut().zip(&dx) {
                        *d += *v;
                    }
                });
            }
            Op::ScatterMax { feats, winners } => {
                let c = self.dims(*feats)[1];
                let area = node.value.numel() / c;
                acc(grads, *feats, &mut |df| {
                    for ch in 0..c {
                        for cell in 0..area {
                            let pos = ch * area + cell;
                            let k = winners[pos];
                            if k >= 0 {
                                df[k as usize * c + ch] += g[pos];
                            }
                        }
                    }
                });
            }
            Op::FocalLoss {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let xs = self.value(*logits).data();
                let one = T::one();
                acc(grads, *logits, &mut |dx| {
                    for i in 0..dx.len() {
                        let x = xs[i];
                        let p = kernels::sigmoid(x);
                        let u = one - p;
                        let dldx = if targets[i] == 1 {
                            let ln_p = -kernels::softplus(-x);
                            *alpha * u.powf(*gamma) * (*gamma * p * ln_p - u)
                        } else {
                            let ln_q = -kernels::softplus(x);
                            (one - *alpha) * p.powf(*gamma) * (p - *gamma * u * ln_q)
                        };
                        dx[i] += g[i] * dldx;
                    }
                });
            }
            Op::SmoothL1 { pred, target, beta } => {
                let ps = self.value(*pred).data();
                acc(grads, *pred, &mut |dx| {
                    for i in 0..dx.len() {
                        let d = ps[i] - target[i];
                        let slope = if d.abs() < *beta {
                            d / *beta
                        } else if d > T::zero() {
                            T::one()
                        } else {
                            -T::one()
                        };
                        dx[i] += g[i] * slope;
                    }
                });
            }
            Op::CrossEntropyRows { logits, labels } => {
                let ld = self.dims(*logits);
                let (n, c) = (ld[0], ld[1]);
                let probs = kernels::softmax_rows(self.value(*logits).data(), n, c);
                acc(grads, *logits, &mut |dx| {
                    for i in 0..n {
                        for j in 0..c {
                            let ind = if labels[i] == j { T::one() } else { T::zero() };
                            dx[i * c + j] += g[i] * (probs[i * c + j] - ind);
                        }
                    }
                });
            }
        }
    }
}
