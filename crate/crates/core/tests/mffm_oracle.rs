//! Independent straight-line oracle for the fusion module, written
//! with plain loops against the module equations rather than the graph
//! engine.

use mmfusion_core::graph::Graph;
use mmfusion_core::mffm::{self, MffmConfig, ResidualMode};
use mmfusion_core::params::ParamStore;
use mmfusion_core::rng::{named_rng, uniform_vec};
use mmfusion_core::tensor::Tensor;

// ---- oracle building blocks (no graph code) ----------------------------

fn o_pool(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let y0 = oy * h / oh;
            let y1 = ((oy + 1) * h + oh - 1) / oh;
            for ox in 0..ow {
                let x0 = ox * w / ow;
                let x1 = ((ox + 1) * w + ow - 1) / ow;
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[ch * h * w + y * w + xx];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

fn o_taps(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * input as f64 / output as f64 - 0.5;
    if src <= 0.0 {
        (0, 0, 0.0)
    } else if src.floor() as usize + 1 >= input {
        (input - 1, input - 1, 0.0)
    } else {
        let i = src.floor() as usize;
        (i, i + 1, src - i as f64)
    }
}

fn o_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = o_taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = o_taps(ox, w, ow);
            for ch in 0..c {
                let b = ch * h * w;
                let top = x[b + y0 * w + x0] + fx * (x[b + y0 * w + x1] - x[b + y0 * w + x0]);
                let bot = x[b + y1 * w + x0] + fx * (x[b + y1 * w + x1] - x[b + y1 * w + x0]);
                out[ch * oh * ow + oy * ow + ox] = top + fy * (bot - top);
            }
        }
    }
    out
}

fn o_resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if oh <= h && ow <= w {
        o_pool(x, c, h, w, oh, ow)
    } else {
        o_bilinear(x, c, h, w, oh, ow)
    }
}

/// Per-token linear map `y = x W^T + b` over `[n, c]` rows.
fn o_linear(x: &[f64], w: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for o in 0..c {
            let mut s = b[o];
            for p in 0..c {
                s += x[i * c + p] * w[o * c + p];
            }
            out[i * c + o] = s;
        }
    }
    out
}

fn o_softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn o_conv3x3(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (wd + 2 - 3) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for c_out in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b[c_out];
                for c_in in 0..ci {
                    for ky in 0..3 {
                        let iy = (y * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (xx * stride + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            s += x[c_in * h * wd + iy as usize * wd + ix as usize]
                                * w[c_out * ci * 9 + c_in * 9 + ky * 3 + kx];
                        }
                    }
                }
                out[c_out * oh * ow + y * ow + xx] = s;
            }
        }
    }
    (out, oh, ow)
}

fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(name).unwrap().data().to_vec()
}

/// Whole-module oracle producing (pre_stack, output).
fn mffm_oracle(
    store: &ParamStore<f64>,
    cfg: &MffmConfig,
    f_l: &Tensor<f64>,
    f_i: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let c = cfg.channels;
    let (ph, pw) = (cfg.pooled_hw[0], cfg.pooled_hw[1]);
    let n = ph * pw;
    let (h1, w1) = (f_l.dims()[1], f_l.dims()[2]);

    // pool + positional encodings, flatten to tokens [n, c]
    let tokens = |map: &Tensor<f64>, pe: &str| -> Vec<f64> {
        let pooled = o_resize(map.data(), c, map.dims()[1], map.dims()[2], ph, pw);
        let pe = param(store, pe);
        let mut t = vec![0.0; n * c];
        for ch in 0..c {
            for cell in 0..n {
                t[cell * c + ch] = pooled[ch * n + cell] + pe[ch * n + cell];
            }
        }
        t
    };
    let tl = tokens(f_l, "mffm.p_le");
    let ti = tokens(f_i, "mffm.p_ie");

    let q = o_linear(&tl, &param(store, "mffm.q.w"), &param(store, "mffm.q.b"), n, c);
    let k = o_linear(&ti, &param(store, "mffm.k.w"), &param(store, "mffm.k.b"), n, c);
    let v = o_linear(&ti, &param(store, "mffm.v.w"), &param(store, "mffm.v.b"), n, c);

    // scaled dot-product attention
    let scale = 1.0 / (c as f64).sqrt();
    let mut attended = vec![0.0; n * c];
    for i in 0..n {
        let mut row = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..c {
                s += q[i * c + p] * k[j * c + p];
            }
            row[j] = s * scale;
        }
        o_softmax_row(&mut row);
        for j in 0..n {
            for p in 0..c {
                attended[i * c + p] += row[j] * v[j * c + p];
            }
        }
    }

    // residual + projection
    let mut resid = vec![0.0; n * c];
    for i in 0..n * c {
        resid[i] = attended[i]
            + match cfg.residual_mode {
                ResidualMode::LiteralValue => v[i],
                ResidualMode::QuerySide => tl[i],
            };
    }
    let projected = o_linear(
        &resid,
        &param(store, "mffm.out.w"),
        &param(store, "mffm.out.b"),
        n,
        c,
    );

    // back to a map, upsample, residual add
    let mut grid = vec![0.0; c * n];
    for cell in 0..n {
        for ch in 0..c {
            grid[ch * n + cell] = projected[cell * c + ch];
        }
    }
    let up = o_bilinear(&grid, c, ph, pw, h1, w1);
    let mut pre = vec![0.0; c * h1 * w1];
    for i in 0..pre.len() {
        pre[i] = f_l.data()[i] + up[i];
    }

    // post stack: stride-2 walk, upsample before the final 3x3 projection
    let mut x = pre.clone();
    let (mut ci, mut h, mut w) = (c, h1, w1);
    let last = cfg.post_channels.len() - 1;
    for (i, &co) in cfg.post_channels.iter().enumerate() {
        let wt = param(store, &format!("mffm.post{i}.w"));
        let bt = param(store, &format!("mffm.post{i}.b"));
        if i < last {
            let (y, oh, ow) = o_conv3x3(&x, &wt, &bt, ci, h, w, co, 2);
            x = y.iter().map(|v| v.max(0.0)).collect();
            h = oh;
            w = ow;
            ci = co;
            if i + 1 == last {
                x = o_bilinear(&x, ci, h, w, h1, w1);
                h = h1;
                w = w1;
            }
        } else if last == 0 {
            let (y, oh, ow) = o_conv3x3(&x, &wt, &bt, ci, h, w, co, 2);
            x = y.iter().map(|v| v.max(0.0)).collect();
            x = o_bilinear(&x, co, oh, ow, h1, w1);
            ci = co;
            h = h1;
            w = w1;
        } else {
            let (y, _, _) = o_conv3x3(&x, &wt, &bt, ci, h, w, co, 1);
            x = y;
            ci = co;
        }
    }
    (pre, x)
}

fn random_map(seed: u64, name: &str, dims: Vec<usize>) -> Tensor<f64> {
    let n = dims.iter().product();
    let mut rng = named_rng(seed, name);
    Tensor::new(dims, uniform_vec(&mut rng, n, -1.0, 1.0)).unwrap()
}

#[test]
fn random_small_config_matches_oracle() {
    for (seed, mode) in [(0, ResidualMode::LiteralValue), (1, ResidualMode::QuerySide)] {
        let cfg = MffmConfig {
            pooled_hw: [3, 4],
            channels: 5,
            residual_mode: mode,
            post_channels: vec![3, 5],
        };
        let mut store: ParamStore<f64> = ParamStore::new(seed);
        mffm::register_params(&mut store, &cfg).unwrap();
        store.jitter(0.1); // positional encodings and biases become non-trivial

        let f_l = random_map(seed, "fl", vec![5, 8, 10]);
        let f_i = random_map(seed, "fi", vec![5, 6, 2]);
        let (pre_expect, out_expect) = mffm_oracle(&store, &cfg, &f_l, &f_i);

        let mut g = Graph::new();
        let l = g.leaf(f_l.clone());
        let i = g.leaf(f_i.clone());
        let got = mffm::mffm_forward(&mut g, l, i, &store, &cfg).unwrap();

        let pre = g.value(got.pre_stack);
        for (a, b) in pre.data().iter().zip(&pre_expect) {
            assert!((a - b).abs() < 1e-6, "pre-stack {a} vs {b}");
        }
        let out = g.value(got.output);
        for (a, b) in out.data().iter().zip(&out_expect) {
            assert!((a - b).abs() < 1e-6, "output {a} vs {b}");
        }
    }
}

#[test]
fn two_token_scalar_end_to_end_hand_case() {
    // One channel, 1x2 token grid, hand-settable weights. With unit
    // projections and zero encodings: q = k = v = tokens; attention
    // rows softmax([t_i * t_j / 1]); literal residual adds v.
    let cfg = MffmConfig {
        pooled_hw: [1, 2],
        channels: 1,
        residual_mode: ResidualMode::LiteralValue,
        post_channels: vec![1],
    };
    let mut store: ParamStore<f64> = ParamStore::new(0);
    mffm::register_params(&mut store, &cfg).unwrap();
    store
        .set_value("mffm.q.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
        .unwrap();
    store
        .set_value("mffm.k.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
        .unwrap();
    store
        .set_value("mffm.v.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
        .unwrap();
    store
        .set_value("mffm.out.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
        .unwrap();

    let f_l = Tensor::new(vec![1, 1, 2], vec![0.6, -0.2]).unwrap();
    let f_i = Tensor::new(vec![1, 1, 2], vec![0.5, 1.5]).unwrap();

    // Hand evaluation.
    let (t0, t1) = (0.6, -0.2);
    let (u0, u1) = (0.5, 1.5);
    let soft = |a: f64, b: f64| {
        let (ea, eb) = (a.exp(), b.exp());
        (ea / (ea + eb), eb / (ea + eb))
    };
    let (w00, w01) = soft(t0 * u0, t0 * u1);
    let (w10, w11) = soft(t1 * u0, t1 * u1);
    let a0 = w00 * u0 + w01 * u1;
    let a1 = w10 * u0 + w11 * u1;
    let pre0 = t0 + (a0 + u0);
    let pre1 = t1 + (a1 + u1);

    let mut g = Graph::new();
    let l = g.leaf(f_l);
    let i = g.leaf(f_i);
    let out = mffm::mffm_forward(&mut g, l, i, &store, &cfg).unwrap();
    let pre = g.value(out.pre_stack);
    assert!((pre.data()[0] - pre0).abs() < 1e-12, "{} vs {pre0}", pre.data()[0]);
    assert!((pre.data()[1] - pre1).abs() < 1e-12, "{} vs {pre1}", pre.data()[1]);
}

#[test]
fn attended_rows_stay_in_value_hull() {
    for seed in 0..100u64 {
        let mut rng = named_rng(seed, "hull");
        let n = 1 + (seed as usize % 7) * 3;
        let m = 2 + (seed as usize % 5) * 4;
        let c = 1 + (seed as usize % 4) * 3;
        let q = Tensor::new(vec![n, c], uniform_vec(&mut rng, n * c, -2.0, 2.0)).unwrap();
        let k = Tensor::new(vec![m, c], uniform_vec(&mut rng, m * c, -2.0, 2.0)).unwrap();
        let v = Tensor::new(vec![m, c], uniform_vec(&mut rng, m * c, -3.0, 3.0)).unwrap();
        let mut g = Graph::new();
        let (qi, ki, vi) = (g.leaf(q), g.leaf(k), g.leaf(v.clone()));
        let (w, a) = mffm::cross_attention(&mut g, qi, ki, vi, c).unwrap();

        for i in 0..n {
            let row_sum: f64 = (0..m).map(|j| g.value(w).at2(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-5, "seed {seed}: row sum {row_sum}");
        }
        for ch in 0..c {
            let lo = (0..m).map(|j| v.at2(j, ch)).fold(f64::INFINITY, f64::min);
            let hi = (0..m).map(|j| v.at2(j, ch)).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let x = g.value(a).at2(i, ch);
                assert!(
                    x >= lo - 1e-9 && x <= hi + 1e-9,
                    "seed {seed}: {x} outside [{lo}, {hi}]"
                );
            }
        }
    }
}

#[test]
fn fusion_gradients_match_finite_differences() {
    use mmfusion_core::gradcheck::grad_check;
    let cfg = MffmConfig {
        pooled_hw: [2, 2],
        channels: 3,
        residual_mode: ResidualMode::LiteralValue,
        post_channels: vec![2, 3],
    };
    let mut store: ParamStore<f64> = ParamStore::new(21);
    mffm::register_params(&mut store, &cfg).unwrap();
    store.jitter(0.05);

    let f_l = random_map(5, "gl", vec![3, 4, 6]);
    let f_i = random_map(5, "gi", vec![3, 3, 2]);
    let build = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let l = g.leaf(f_l.clone());
        let i = g.leaf(f_i.clone());
        let out = mffm::mffm_forward(g, l, i, s, &cfg)?;
        Ok(g.sum_all(out.output))
    };
    let mut g = Graph::new();
    let loss = build(&mut g, &store).unwrap();
    store.zero_grads();
    g.backward(loss, &mut store).unwrap();
    let f = |s: &ParamStore<f64>| -> mmfusion_core::Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok(g.value(loss).data()[0])
    };
    let report = grad_check(&mut store, f, 1e-5, 1e-5).unwrap();
    assert!(
        report.pass,
        "max rel err {} at {}",
        report.max_rel_err, report.worst_param
    );
}
