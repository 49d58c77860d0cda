//! Raw numeric kernels shared by the graph ops and their backward passes.
//!
//! All functions operate on row-major slices; shape checking happens in
//! the graph builders, so these assume conforming inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{sc, Scalar};

// Inherent float math is std-only; route through the trait otherwise.
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// `c[n,m] = a[n,k] * b[k,m]`, or `a[n,k] * b[m,k]^T` when `trans_b`.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    n: usize,
    k: usize,
    m: usize,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if trans_b {
        // Row-by-row dot products; both operands walk contiguously.
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = T::zero();
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * m + j] = s;
            }
        }
    } else {
        // Accumulate whole output rows so the inner loop is contiguous.
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = arow[p];
                let brow = &b[p * m..(p + 1) * m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// `y[n,o] = x[n,i] * w[o,i]^T (+ b[o])`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, i: usize, o: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    for r in 0..n {
        for c in 0..o {
            let mut s = match b {
                Some(bias) => bias[c],
                None => T::zero(),
            };
            for p in 0..i {
                s += x[r * i + p] * w[c * i + p];
            }
            out[r * o + c] = s;
        }
    }
    out
}

/// Softmax over the last axis of a `[rows, m]` view, with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * m];
    for r in 0..rows {
        let row = &x[r * m..(r + 1) * m];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[r * m + j] = e;
            sum += e;
        }
        for j in 0..m {
            out[r * m + j] /= sum;
        }
    }
    out
}

/// Gradient of `softmax_rows`: `dx = y * (g - sum(g * y))` per row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], g: &[T], rows: usize, m: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * m];
    for r in 0..rows {
        let mut dot = T::zero();
        for j in 0..m {
            dot += g[r * m + j] * y[r * m + j];
        }
        for j in 0..m {
            dx[r * m + j] = y[r * m + j] * (g[r * m + j] - dot);
        }
    }
    dx
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output rows `[y_lo, y_hi)` whose tap `k` lands inside the input
/// for one spatial axis: `0 <= y*stride + k - pad < input`.
fn tap_range(input: usize, output: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_in = input + pad;
    let hi = if k >= hi_in {
        0
    } else {
        ((hi_in - k - 1) / stride + 1).min(output)
    };
    (lo.min(hi), hi)
}

/// `y[co, oh, ow]` for `x[ci, h, w]` and `w[co, ci, kh, kw]`.
///
/// Loops are ordered tap-outermost so the inner sweep over output
/// columns reads and writes contiguously.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, kh, stride, pad).unwrap();
    let ow = conv_out_dim(wd, kw, stride, pad).unwrap();
    let mut out = vec![T::zero(); co * oh * ow];
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        if let Some(bias) = b {
            let bv = bias[c_out];
            for v in &mut out[obase..obase + oh * ow] {
                *v = bv;
            }
        }
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                let (y_lo, y_hi) = tap_range(h, oh, stride, pad, ky);
                for kx in 0..kw {
                    let (x_lo, x_hi) = tap_range(wd, ow, stride, pad, kx);
                    let wv = w[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let iy = y * stride + ky - pad;
                        let irow = xbase + iy * wd + kx;
                        let orow = obase + y * ow;
                        if stride == 1 {
                            // x_lo guarantees x_lo + kx >= pad.
                            let start = irow + x_lo - pad;
                            let src = &x[start..start + (x_hi - x_lo)];
                            let dst = &mut out[orow + x_lo..orow + x_hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * *s;
                            }
                        } else {
                            for xx in x_lo..x_hi {
                                out[orow + xx] += wv * x[irow + xx * stride - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input, weights and bias; same loop
/// organization as the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oh = conv_out_dim(h, kh, stride, pad).unwrap();
    let ow = conv_out_dim(wd, kw, stride, pad).unwrap();
    let mut dx = vec![T::zero(); ci * h * wd];
    let mut dw = vec![T::zero(); co * ci * kh * kw];
    let mut db = vec![T::zero(); co];
    for c_out in 0..co {
        let obase = c_out * oh * ow;
        let mut bias_sum = T::zero();
        for v in &g[obase..obase + oh * ow] {
            bias_sum += *v;
        }
        db[c_out] = bias_sum;
        for c_in in 0..ci {
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                let (y_lo, y_hi) = tap_range(h, oh, stride, pad, ky);
                for kx in 0..kw {
                    let (x_lo, x_hi) = tap_range(wd, ow, stride, pad, kx);
                    let wi = ((c_out * ci + c_in) * kh + ky) * kw + kx;
                    let wv = w[wi];
                    let mut wacc = T::zero();
                    for y in y_lo..y_hi {
                        let iy = y * stride + ky - pad;
                        let irow = xbase + iy * wd + kx;
                        let orow = obase + y * ow;
                        for xx in x_lo..x_hi {
                            let xi = irow + xx * stride - pad;
                            let gv = g[orow + xx];
                            wacc += gv * x[xi];
                            dx[xi] += gv * wv;
                        }
                    }
                    dw[wi] += wacc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Window `[start, end)` of output cell `o` when tiling `input` cells
/// into `output` windows (adaptive pooling semantics).
pub fn pool_window(o: usize, input: usize, output: usize) -> (usize, usize) {
    let start = o * input / output;
    let end = ((o + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling `[c, h, w] -> [c, oh, ow]` (requires `oh <= h`, `ow <= w`).
pub fn avg_pool<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let mut s = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[ch * h * w + y * w + xx];
                    }
                }
                let area = sc::<T>(((y1 - y0) * (x1 - x0)) as f64);
                out[ch * oh * ow + oy * ow + ox] = s / area;
            }
        }
    }
    out
}

/// Gradient of `avg_pool`: spreads each output gradient uniformly over its window.
pub fn avg_pool_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let area = sc::<T>(((y1 - y0) * (x1 - x0)) as f64);
                let gv = g[ch * oh * ow + oy * ow + ox] / area;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[ch * h * w + y * w + xx] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for bilinear resize without corner
/// alignment: `src = (dst + 0.5) * in/out - 0.5`, clamped.
pub fn bilinear_taps(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * (input as f64 / output as f64) - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let i0 = src.floor() as usize;
    if i0 + 1 >= input {
        return (input - 1, input - 1, 0.0);
    }
    (i0, i0 + 1, src - i0 as f64)
}

/// Bilinear resize `[c, h, w] -> [c, oh, ow]` (either direction).
pub fn bilinear_resize<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oy, h, oh);
        let fy = sc::<T>(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ox, w, ow);
            let fx = sc::<T>(fx);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = x[base + y0 * w + x0];
                let v01 = x[base + y0 * w + x1];
                let v10 = x[base + y1 * w + x0];
                let v11 = x[base + y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[ch * oh * ow + oy * ow + ox] = top + fy * (bot - top);
            }
        }
    }
    out
}

/// Gradient of `bilinear_resize`: accumulates tap weights back to the source.
pub fn bilinear_resize_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    for oy in 0..oh {
        let (y0, y1, fy) = bilinear_taps(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = bilinear_taps(ox, w, ow);
            let w00 = sc::<T>((1.0 - fy) * (1.0 - fx));
            let w01 = sc::<T>((1.0 - fy) * fx);
            let w10 = sc::<T>(fy * (1.0 - fx));
            let w11 = sc::<T>(fy * fx);
            for ch in 0..c {
                let gv = g[ch * oh * ow + oy * ow + ox];
                let base = ch * h * w;
                dx[base + y0 * w + x0] += gv * w00;
                dx[base + y0 * w + x1] += gv * w01;
                dx[base + y1 * w + x0] += gv * w10;
                dx[base + y1 * w + x1] += gv * w11;
            }
        }
    }
    dx
}

/// Max-scatter of per-voxel features `[k, c]` onto a `[c, gy, gx]` grid.
///
/// Cells with at least one contributor hold the element-wise maximum
/// over contributors (ties keep the lowest voxel row); untouched cells
/// stay zero. Returns the map and the winning row per `(channel, cell)`
/// (`-1` where no voxel lands).
pub fn scatter_max<T: Scalar>(
    feats: &[T],
    cells: &[usize],
    k: usize,
    c: usize,
    gy: usize,
    gx: usize,
) -> (Vec<T>, Vec<i64>) {
    let area = gy * gx;
    let mut out = vec![T::zero(); c * area];
    let mut winners = vec![-1i64; c * area];
    for row in 0..k {
        let cell = cells[row];
        for ch in 0..c {
            let pos = ch * area + cell;
            let v = feats[row * c + ch];
            if winners[pos] < 0 || v > out[pos] {
                out[pos] = v;
                winners[pos] = row as i64;
            }
        }
    }
    (out, winners)
}

/// Stable `ln(1 + e^z)`.
pub fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + z.neg().exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + z.neg().exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
