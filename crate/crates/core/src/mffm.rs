//! Multi-modal feature fusion.
//!
//! Both stream maps are resized to a shared token grid, given learned
//! additive positional encodings, and flattened to token rows. LiDAR
//! tokens form the queries; image tokens form keys and values of a
//! scaled dot-product cross-attention. The attended features are
//! projected, reshaped, bilinearly upsampled and residually added to
//! the LiDAR map, then pushed through a small down/up convolution
//! stack.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};
use crate::streams::resize_to;

// Inherent float math is std-only; route through the trait otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// What the attended features are residually combined with before the
/// output projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ResidualMode {
    /// `out = proj(attended + values)` — the literal reading; well
    /// typed because both token grids share one size.
    #[default]
    LiteralValue,
    /// `out = proj(attended + lidar_tokens)` — query-side residual.
    QuerySide,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MffmConfig {
    /// Shared token grid (H1', W1'); token count n = H1' * W1'.
    pub pooled_hw: [usize; 2],
    /// Channel width shared by both streams.
    pub channels: usize,
    pub residual_mode: ResidualMode,
    /// Channel walk of the post-fusion down/up stack; the last entry
    /// must equal `channels`.
    pub post_channels: Vec<usize>,
}

impl Default for MffmConfig {
    fn default() -> Self {
        MffmConfig {
            pooled_hw: [25, 22],
            channels: 256,
            residual_mode: ResidualMode::LiteralValue,
            post_channels: alloc::vec![128, 256],
        }
    }
}

impl MffmConfig {
    pub fn tokens(&self) -> usize {
        self.pooled_hw[0] * self.pooled_hw[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens() == 0 {
            return Err(Error::Config("pooled token grid must be non-empty".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("mffm channels must be >= 1".into()));
        }
        if self.post_channels.is_empty() || self.post_channels.contains(&0) {
            return Err(Error::Config("post_channels must be non-empty and positive".into()));
        }
        if *self.post_channels.last().unwrap() != self.channels {
            return Err(Error::Config(format!(
                "post_channels must end at the shared width {}, got {:?}",
                self.channels, self.post_channels
            )));
        }
        Ok(())
    }
}

/// Registers positional encodings, the three token projections, the
/// output projection and the post-fusion stack.
pub fn register_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &MffmConfig) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    let (h, w) = (cfg.pooled_hw[0], cfg.pooled_hw[1]);
    // Zero-initialised: fusion starts as an identity over the LiDAR map.
    store.register_zeros("mffm.p_le", alloc::vec![c, h, w])?;
    store.register_zeros("mffm.p_ie", alloc::vec![c, h, w])?;
    for name in ["q", "k", "v", "out"] {
        store.register_weight(&format!("mffm.{name}.w"), alloc::vec![c, c], c)?;
        store.register_zeros(&format!("mffm.{name}.b"), alloc::vec![c])?;
    }
    let mut c_in = c;
    for (i, &c_out) in cfg.post_channels.iter().enumerate() {
        store.register_weight(
            &format!("mffm.post{i}.w"),
            alloc::vec![c_out, c_in, 3, 3],
            c_in * 9,
        )?;
        store.register_zeros(&format!("mffm.post{i}.b"), alloc::vec![c_out])?;
        c_in = c_out;
    }
    Ok(())
}

/// Token rows of both streams after resizing to the shared grid and
/// adding the positional encodings: `(lidar [n, C], image [n, C])`.
pub struct TokenPair {
    pub lidar: NodeId,
    pub image: NodeId,
}

fn to_tokens<T: Scalar>(g: &mut Graph<T>, map: NodeId, c: usize, n: usize) -> Result<NodeId> {
    let flat = g.reshape(map, alloc::vec![c, n])?;
    g.transpose(flat)
}

/// Resizes both maps to the shared grid (mean pooling when shrinking,
/// bilinear when a dim must grow), adds the learned positional
/// encodings, and flattens row-major into token rows.
pub fn pool_and_encode<T: Scalar>(
    g: &mut Graph<T>,
    f_l: NodeId,
    f_i: NodeId,
    store: &ParamStore<T>,
    cfg: &MffmConfig,
) -> Result<TokenPair> {
    cfg.validate()?;
    let c = cfg.channels;
    if g.dims(f_l)[0] != c || g.dims(f_i)[0] != c {
        return Err(Error::Shape {
            op: "pool_and_encode",
            detail: format!(
                "stream channels {:?} / {:?} vs configured {c}",
                g.dims(f_l),
                g.dims(f_i)
            ),
        });
    }
    let hw = (cfg.pooled_hw[0], cfg.pooled_hw[1]);
    let n = cfg.tokens();

    let pooled_l = resize_to(g, f_l, hw)?;
    let pe_l = g.param(store, "mffm.p_le")?;
    let enc_l = g.add(pooled_l, pe_l)?;

    let pooled_i = resize_to(g, f_i, hw)?;
    let pe_i = g.param(store, "mffm.p_ie")?;
    let enc_i = g.add(pooled_i, pe_i)?;

    Ok(TokenPair {
        lidar: to_tokens(g, enc_l, c, n)?,
        image: to_tokens(g, enc_i, c, n)?,
    })
}

/// Per-token linear projections: queries from LiDAR tokens, keys and
/// values from image tokens.
pub fn project_qkv<T: Scalar>(
    g: &mut Graph<T>,
    tokens: &TokenPair,
    store: &ParamStore<T>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let proj = |g: &mut Graph<T>, x: NodeId, name: &str| -> Result<NodeId> {
        let w = g.param(store, &format!("mffm.{name}.w"))?;
        let b = g.param(store, &format!("mffm.{name}.b"))?;
        g.linear(x, w, Some(b))
    };
    let q = proj(g, tokens.lidar, "q")?;
    let k = proj(g, tokens.image, "k")?;
    let v = proj(g, tokens.image, "v")?;
    Ok((q, k, v))
}

/// Scaled dot-product attention: `W = softmax(Q K^T / sqrt(C))`,
/// `A = W V`. Returns `(W, A)`; every row of `W` is stochastic.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    channels: usize,
) -> Result<(NodeId, NodeId)> {
    if g.dims(q)[1] != channels || g.dims(k)[1] != channels {
        return Err(Error::Shape {
            op: "cross_attention",
            detail: format!(
                "token width {:?} / {:?} vs channels {channels}",
                g.dims(q),
                g.dims(k)
            ),
        });
    }
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, sc::<T>(1.0 / (channels as f64).sqrt()));
    if !g.value(scaled).all_finite() {
        return Err(Error::Numeric("attention logits are not finite".into()));
    }
    let weights = g.softmax_last(scaled)?;
    let attended = g.matmul(weights, v)?;
    Ok((weights, attended))
}

/// Output of [`fuse`]: the residual sum before the post stack (exactly
/// `f_L` when the image contributes nothing) and the final map.
pub struct FusionNodes {
    pub pre_stack: NodeId,
    pub output: NodeId,
}

/// Projects the attended tokens, reshapes them back to the pooled grid,
/// bilinearly upsamples to the LiDAR map size, residually adds, and
/// applies the post-fusion stack (stride-2 convolutions walking
/// `post_channels` down, one upsample back, final 3x3 projection).
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    f_l: NodeId,
    attended: NodeId,
    values: NodeId,
    lidar_tokens: NodeId,
    store: &ParamStore<T>,
    cfg: &MffmConfig,
) -> Result<FusionNodes> {
    cfg.validate()?;
    let c = cfg.channels;
    let (h1, w1) = (g.dims(f_l)[1], g.dims(f_l)[2]);

    let residual = match cfg.residual_mode {
        ResidualMode::LiteralValue => g.add(attended, values)?,
        ResidualMode::QuerySide => g.add(attended, lidar_tokens)?,
    };
    let w = g.param(store, "mffm.out.w")?;
    let b = g.param(store, "mffm.out.b")?;
    let projected = g.linear(residual, w, Some(b))?;

    let grid = g.transpose(projected)?; // [C, n]
    let map = g.reshape(grid, alloc::vec![c, cfg.pooled_hw[0], cfg.pooled_hw[1]])?;
    let up = g.upsample2d(map, (h1, w1))?;
    let pre_stack = g.add(f_l, up)?;

    // Down through the walk with stride 2, then back up and project.
    let mut x = pre_stack;
    let last = cfg.post_channels.len() - 1;
    for (i, _) in cfg.post_channels.iter().enumerate() {
        let w = g.param(store, &format!("mffm.post{i}.w"))?;
        let b = g.param(store, &format!("mffm.post{i}.b"))?;
        if i < last {
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.relu(x);
            if i + 1 == last {
                x = g.upsample2d(x, (h1, w1))?;
            }
        } else if last == 0 {
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.relu(x);
            x = g.upsample2d(x, (h1, w1))?;
        } else {
            x = g.conv2d(x, w, Some(b), 1, 1)?;
        }
    }
    Ok(FusionNodes {
        pre_stack,
        output: x,
    })
}

/// Full module: pool + encode, project, attend, fuse.
pub fn mffm_forward<T: Scalar>(
    g: &mut Graph<T>,
    f_l: NodeId,
    f_i: NodeId,
    store: &ParamStore<T>,
    cfg: &MffmConfig,
) -> Result<FusionNodes> {
    let tokens = pool_and_encode(g, f_l, f_i, store, cfg)?;
    let (q, k, v) = project_qkv(g, &tokens, store)?;
    let (_, attended) = cross_attention(g, q, k, v, cfg.channels)?;
    fuse(g, f_l, attended, v, tokens.lidar, store, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn tiny_cfg() -> MffmConfig {
        MffmConfig {
            pooled_hw: [3, 3],
            channels: 4,
            residual_mode: ResidualMode::LiteralValue,
            post_channels: vec![2, 4],
        }
    }

    fn random_map(seed: u64, dims: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n = dims.iter().product();
        let mut rng = crate::rng::named_rng(seed, "mffm.map");
        Tensor::new(dims, crate::rng::uniform_vec(&mut rng, n, lo, hi)).unwrap()
    }

    #[test]
    fn constant_map_with_zero_encoding_gives_equal_tokens() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(0);
        register_params(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        let f_l = g.leaf(Tensor::full(vec![4, 6, 9], 1.5));
        let f_i = g.leaf(Tensor::full(vec![4, 5, 2], -0.5));
        let tokens = pool_and_encode(&mut g, f_l, f_i, &store, &cfg).unwrap();
        let l = g.value(tokens.lidar);
        assert_eq!(l.dims(), &[9, 4]);
        assert!(l.data().iter().all(|v| (*v - 1.5).abs() < 1e-12));
        let i = g.value(tokens.image);
        assert!(i.data().iter().all(|v| (*v + 0.5).abs() < 1e-12));
    }

    #[test]
    fn identity_sized_pooling_flattens_input() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(0);
        register_params(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        let map = random_map(1, vec![4, 3, 3], -1.0, 1.0);
        let f_l = g.leaf(map.clone());
        let f_i = g.leaf(random_map(2, vec![4, 3, 3], -1.0, 1.0));
        let tokens = pool_and_encode(&mut g, f_l, f_i, &store, &cfg).unwrap();
        let l = g.value(tokens.lidar);
        for t in 0..9 {
            for c in 0..4 {
                assert_eq!(l.at2(t, c), map.at3(c, t / 3, t % 3));
            }
        }
    }

    #[test]
    fn exact_mean_windows_for_divisible_grids() {
        // 8x8 windows: 200/25 and 176/22 both equal 8.
        let cfg = MffmConfig::default();
        let mut g: Graph<f64> = Graph::new();
        let map = random_map(3, vec![1, 200, 176], -1.0, 1.0);
        let f = g.leaf(map.clone());
        let pooled = resize_to(&mut g, f, (cfg.pooled_hw[0], cfg.pooled_hw[1])).unwrap();
        assert_eq!(g.dims(pooled), &[1, 25, 22]);
        // Independent 8x8 window means.
        for oy in 0..25 {
            for ox in 0..22 {
                let mut s = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        s += map.at3(0, oy * 8 + y, ox * 8 + x);
                    }
                }
                let expect = s / 64.0;
                let got = g.value(pooled).at3(0, oy, ox);
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_projection_passes_tokens() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(0);
        register_params(&mut store, &cfg).unwrap();
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        store.set_value("mffm.q.w", eye).unwrap();
        let mut g = Graph::new();
        let f_l = g.leaf(random_map(4, vec![4, 3, 3], -1.0, 1.0));
        let f_i = g.leaf(random_map(5, vec![4, 3, 3], -1.0, 1.0));
        let tokens = pool_and_encode(&mut g, f_l, f_i, &store, &cfg).unwrap();
        let (q, _, _) = project_qkv(&mut g, &tokens, &store).unwrap();
        assert_eq!(g.value(q).data(), g.value(tokens.lidar).data());
    }

    #[test]
    fn zero_image_tokens_give_zero_keys_values() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(1);
        register_params(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        let f_l = g.leaf(random_map(6, vec![4, 3, 3], -1.0, 1.0));
        let f_i = g.leaf(Tensor::zeros(vec![4, 3, 3]));
        let tokens = pool_and_encode(&mut g, f_l, f_i, &store, &cfg).unwrap();
        let (_, k, v) = project_qkv(&mut g, &tokens, &store).unwrap();
        assert!(g.value(k).data().iter().all(|x| *x == 0.0));
        assert!(g.value(v).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn attention_weights_by_hand() {
        // C = 1, Q = [[2]], K = [[1], [3]]: logits [2, 6],
        // softmax = [1, e^4] / (1 + e^4).
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let k = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let v = g.leaf(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let (w, a) = cross_attention(&mut g, q, k, v, 1).unwrap();
        let e4 = 4.0f64.exp();
        let w0 = 1.0 / (1.0 + e4);
        let w1 = e4 / (1.0 + e4);
        assert!((g.value(w).at2(0, 0) - w0).abs() < 1e-4);
        assert!((g.value(w).at2(0, 1) - w1).abs() < 1e-4);
        assert!((g.value(w).at2(0, 0) - 0.0180).abs() < 1e-4);
        assert!((g.value(w).at2(0, 1) - 0.9820).abs() < 1e-4);
        assert!((g.value(a).at2(0, 0) - (w0 * 10.0 + w1 * 20.0)).abs() < 1e-9);
    }

    #[test]
    fn equal_keys_average_the_values() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(random_map(7, vec![3, 2], -1.0, 1.0));
        let k = g.leaf(Tensor::full(vec![4, 2], 0.3));
        let v = g.leaf(random_map(8, vec![4, 2], -1.0, 1.0));
        let (w, a) = cross_attention(&mut g, q, k, v, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((g.value(w).at2(i, j) - 0.25).abs() < 1e-12);
            }
        }
        let vv = g.value(v).clone();
        for i in 0..3 {
            for c in 0..2 {
                let mean = (0..4).map(|j| vv.at2(j, c)).sum::<f64>() / 4.0;
                assert!((g.value(a).at2(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap());
        let k = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let v = g.leaf(Tensor::new(vec![1, 2], vec![5.0, 7.0]).unwrap());
        let (w, a) = cross_attention(&mut g, q, k, v, 2).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(a).data(), &[5.0, 7.0]);
    }

    #[test]
    fn zero_image_path_is_identity_before_post_stack() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(11);
        register_params(&mut store, &cfg).unwrap();
        // Biases and positional encodings are zero-initialised; weights
        // stay random. A zero image map must vanish through k/v and the
        // output projection, leaving pre_stack == f_L bit-exactly.
        let mut g = Graph::new();
        let lidar = random_map(9, vec![4, 6, 9], -1.0, 1.0);
        let f_l = g.leaf(lidar.clone());
        let f_i = g.leaf(Tensor::zeros(vec![4, 5, 2]));
        let out = mffm_forward(&mut g, f_l, f_i, &store, &cfg).unwrap();
        assert_eq!(g.value(out.pre_stack).data(), lidar.data());
        assert_eq!(g.dims(out.output), &[4, 6, 9]);
    }

    #[test]
    fn upsampled_constant_shifts_every_cell() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 3, 3], 0.25));
        let up = g.upsample2d(x, (7, 5)).unwrap();
        let base = g.leaf(random_map(10, vec![2, 7, 5], -1.0, 1.0));
        let sum = g.add(base, up).unwrap();
        let b = g.value(base).clone();
        for i in 0..b.numel() {
            assert!((g.value(sum).data()[i] - (b.data()[i] + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn output_dims_track_lidar_map_for_odd_sizes() {
        for (h, w) in [(6, 9), (7, 5), (10, 11)] {
            let cfg = tiny_cfg();
            let mut store: ParamStore<f64> = ParamStore::new(12);
            register_params(&mut store, &cfg).unwrap();
            let mut g = Graph::new();
            let f_l = g.leaf(random_map(13, vec![4, h, w], -1.0, 1.0));
            let f_i = g.leaf(random_map(14, vec![4, 5, 2], -1.0, 1.0));
            let out = mffm_forward(&mut g, f_l, f_i, &store, &cfg).unwrap();
            assert_eq!(g.dims(out.output), &[4, h, w]);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(0);
        register_params(&mut store, &cfg).unwrap();
        let mut g = Graph::new();
        let f_l = g.leaf(Tensor::zeros(vec![3, 6, 9]));
        let f_i = g.leaf(Tensor::zeros(vec![4, 5, 2]));
        assert!(matches!(
            pool_and_encode(&mut g, f_l, f_i, &store, &cfg),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn softmax_is_invariant_to_constant_logit_shifts() {
        let logits = random_map(15, vec![6, 6], -2.0, 2.0);
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(logits.clone());
        let sm_a = g.softmax_last(a).unwrap();
        let shifted = g.leaf(
            Tensor::new(
                vec![6, 6],
                logits.data().iter().map(|v| v + 37.5).collect(),
            )
            .unwrap(),
        );
        let sm_b = g.softmax_last(shifted).unwrap();
        let diff = g.value(sm_a).max_abs_diff(g.value(sm_b));
        assert!(diff < 1e-6, "shift changed weights by {diff}");
    }
}
