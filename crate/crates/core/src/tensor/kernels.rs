//! Forward and backward kernels over raw row-major slices.
//!
//! Nothing here knows about the tape; [`super::tape`] owns shape checking and
//! bookkeeping and calls into these loops.

use serde::{Deserialize, Serialize};

use super::{gemm, Mat, MatMut, Real};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Output side length `(input + 2*pad - kernel)/stride + 1` (floored).
///
/// A strided convolution must downsample by an exact factor, so `input` has to
/// be divisible by `stride`; otherwise the output size is reported as
/// non-integral.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("conv stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    if !input.is_multiple_of(stride) {
        return Err(Error::config(format!(
            "conv output size {input}/{stride} is not integral"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox*stride + j - pad` is in bounds.
    fn valid_range(&self, j: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > j {
            (self.pad - j).div_ceil(s)
        } else {
            0
        };
        let hi_excl = if extent + self.pad > j {
            ((extent - 1 + self.pad - j) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo.min(hi_excl), hi_excl)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.ho, g.wo);
    let plane = g.h * g.w;
    for c in 0..g.c {
        let src = &x[c * plane..(c + 1) * plane];
        for i in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(i, g.h, ho);
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[r * ho * wo..(r + 1) * ho * wo];
                let (ox_lo, ox_hi) = g.valid_range(j, g.w, wo);
                for oy in 0..ho {
                    let row = &mut dst[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi {
                        row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + i - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    row[..ox_lo].fill(T::zero());
                    row[ox_hi..].fill(T::zero());
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    if g.stride == 1 {
                        let ix0 = ox_lo + j - g.pad;
                        row[ox_lo..ox_hi].copy_from_slice(&srow[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            row[ox] = srow[ox * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.ho, g.wo);
    let plane = g.h * g.w;
    for c in 0..g.c {
        let dst = &mut dx[c * plane..(c + 1) * plane];
        for i in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(i, g.h, ho);
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let src = &col[r * ho * wo..(r + 1) * ho * wo];
                let (ox_lo, ox_hi) = g.valid_range(j, g.w, wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + i - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in ox_lo..ox_hi {
                        drow[ox * g.stride + j - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Zero-padded copy of one `[C,H,W]` sample laid out as `[C, Hp*Wp]` plus a
/// `kw`-element tail so shifted views never run off the end.
fn pad_sample<T: Real>(x: &[T], g: &ConvGeom, xp: &mut Vec<T>) {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let len = g.c * hp * wp + g.kw;
    // Only the interior is ever written, so the border stays zero across reuse.
    if xp.len() != len {
        xp.clear();
        xp.resize(len, T::zero());
    }
    for c in 0..g.c {
        for y in 0..g.h {
            let dst = c * hp * wp + (y + g.pad) * wp + g.pad;
            let src = (c * g.h + y) * g.w;
            xp[dst..dst + g.w].copy_from_slice(&x[src..src + g.w]);
        }
    }
}

/// Cross-correlation of `x [N,C,H,W]` with `k [K,C,kh,kw]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    k: &[T],
    kout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let out_len = kout * g.ho * g.wo;
    if g.stride == 1 && !g.is_pointwise() {
        // Shifted-window path: one GEMM per kernel tap over a padded plane,
        // computed on an `ho x wp` grid whose last `wp - wo` columns are junk.
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let taps = g.kh * g.kw;
        let q = g.ho * wp;
        let mut xp = Vec::new();
        let mut full = vec![T::zero(); kout * q];
        let mut out = Vec::with_capacity(n * out_len);
        for s in 0..n {
            pad_sample(&x[s * in_len..(s + 1) * in_len], g, &mut xp);
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let tap = i * g.kw + j;
                    let beta = if tap == 0 { T::zero() } else { T::one() };
                    gemm(
                        kout,
                        g.c,
                        q,
                        T::one(),
                        Mat::strided(k, tap, g.c * taps, taps),
                        Mat::strided(&xp, i * wp + j, hp * wp, 1),
                        beta,
                        MatMut::rows(&mut full, q),
                    );
                }
            }
            for src in full.chunks_exact(wp) {
                out.extend_from_slice(&src[..g.wo]);
            }
        }
        return out;
    }
    let mut out = vec![T::zero(); n * out_len];
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let b: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        let dst = &mut out[s * out_len..(s + 1) * out_len];
        gemm(
            kout,
            rows,
            cols,
            T::one(),
            Mat::rows(k, rows),
            Mat::rows(b, cols),
            T::zero(),
            MatMut::rows(dst, cols),
        );
    }
    out
}

/// Gradients of the convolution. `dx` is only produced when `want_dx`;
/// `dk` is accumulated into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    k: &[T],
    kout: usize,
    g: &ConvGeom,
    dout: &[T],
    want_dx: bool,
    mut dk: Option<&mut [T]>,
) -> Option<Vec<T>> {
    let in_len = g.c * g.h * g.w;
    let out_len = kout * g.ho * g.wo;
    if g.stride == 1 && !g.is_pointwise() {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let taps = g.kh * g.kw;
        let q = g.ho * wp;
        let mut dx = want_dx.then(|| Vec::with_capacity(n * in_len));
        let mut xp = Vec::new();
        let mut dxp = Vec::new();
        // Junk columns stay zero so they contribute nothing to either gradient.
        let mut full = vec![T::zero(); kout * q];
        for s in 0..n {
            let ds = &dout[s * out_len..(s + 1) * out_len];
            for (dst, src) in full.chunks_exact_mut(wp).zip(ds.chunks_exact(g.wo)) {
                dst[..g.wo].copy_from_slice(src);
            }
            if let Some(dk) = dk.as_deref_mut() {
                pad_sample(&x[s * in_len..(s + 1) * in_len], g, &mut xp);
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let tap = i * g.kw + j;
                        gemm(
                            kout,
                            q,
                            g.c,
                            T::one(),
                            Mat::rows(&full, q),
                            Mat::strided(&xp, i * wp + j, 1, hp * wp),
                            T::one(),
                            MatMut::strided(dk, tap, g.c * taps, taps),
                        );
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                dxp.clear();
                dxp.resize(g.c * hp * wp + g.kw, T::zero());
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let tap = i * g.kw + j;
                        gemm(
                            g.c,
                            kout,
                            q,
                            T::one(),
                            Mat::strided(k, tap, taps, g.c * taps),
                            Mat::rows(&full, q),
                            T::one(),
                            MatMut::strided(&mut dxp, i * wp + j, hp * wp, 1),
                        );
                    }
                }
                for c in 0..g.c {
                    for y in 0..g.h {
                        let src = c * hp * wp + (y + g.pad) * wp + g.pad;
                        dx.extend_from_slice(&dxp[src..src + g.w]);
                    }
                }
            }
        }
        return dx;
    }
    let mut dx = want_dx.then(|| vec![T::zero(); n * in_len]);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![
        T::zero();
        if want_dx && !g.is_pointwise() {
            rows * cols
        } else {
            0
        }
    ];
    for s in 0..n {
        let ds = &dout[s * out_len..(s + 1) * out_len];
        if let Some(dk) = dk.as_deref_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            // dk[K, rows] += dout_s[K, cols] * col^T
            gemm(
                kout,
                cols,
                rows,
                T::one(),
                Mat::rows(ds, cols),
                Mat::trans(b, cols),
                T::one(),
                MatMut::rows(dk, rows),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            // dcol[rows, cols] = k^T * dout_s
            let target: &mut [T] = if g.is_pointwise() { dxs } else { &mut dcol };
            gemm(
                rows,
                kout,
                cols,
                T::one(),
                Mat::trans(k, rows),
                Mat::rows(ds, cols),
                T::zero(),
                MatMut::rows(target, cols),
            );
            if !g.is_pointwise() {
                col2im_add(&dcol, g, dxs);
            }
        }
    }
    dx
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Saved forward quantities needed by the batch-norm backward pass.
#[derive(Debug)]
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Sum with eight independent accumulators so the loop vectorizes; the lane
/// partials are combined in `f64`.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            acc[l] += f(c[l]);
        }
    }
    acc.iter().map(|v| v.as_f64()).sum::<f64>() + tail.iter().map(|&v| f(v).as_f64()).sum::<f64>()
}

fn lane_dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| (x * y).as_f64())
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().map(|v| v.as_f64()).sum::<f64>() + tail
}

/// Normalizes `[N,C,plane]` per channel. Train mode uses batch statistics and
/// updates `state`; eval mode reads the running statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    state: &mut BatchNormState,
    train: bool,
) -> (Vec<T>, BnSaved<T>) {
    let mut inv_std = vec![T::zero(); c];
    let mut shift = vec![T::zero(); c];
    let count = (n * plane) as f64;
    let slice = |s: usize, ch: usize| (s * c + ch) * plane..(s * c + ch + 1) * plane;
    for ch in 0..c {
        let (mean, var) = if train {
            let sum: f64 = (0..n).map(|s| lane_sum(&x[slice(s, ch)], |v| v)).sum();
            let mean = sum / count;
            let m = T::from_f64(mean);
            let sq: f64 = (0..n)
                .map(|s| {
                    lane_sum(&x[slice(s, ch)], |v| {
                        let d = v - m;
                        d * d
                    })
                })
                .sum();
            let var = sq / count;
            let unbiased = sq / (count - 1.0);
            state.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * state.running_mean[ch] + BN_MOMENTUM * mean;
            state.running_var[ch] =
                (1.0 - BN_MOMENTUM) * state.running_var[ch] + BN_MOMENTUM * unbiased;
            (mean, var)
        } else {
            (state.running_mean[ch], state.running_var[ch])
        };
        inv_std[ch] = T::from_f64(1.0 / (var + BN_EPS).sqrt());
        shift[ch] = T::from_f64(mean);
    }
    // Filled in memory order so neither buffer needs zeroing first.
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            let (m, is, gm, bt) = (shift[ch], inv_std[ch], gamma[ch], beta[ch]);
            let start = xhat.len();
            xhat.extend(x[slice(s, ch)].iter().map(|&v| (v - m) * is));
            out.extend(xhat[start..].iter().map(|&h| gm * h + bt));
        }
    }
    (
        out,
        BnSaved {
            xhat,
            inv_std,
            train,
        },
    )
}

/// Returns `dx` (when requested) and accumulates `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Real>(
    saved: &BnSaved<T>,
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    dout: &[T],
    want_dx: bool,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Option<Vec<T>> {
    let mut dx = want_dx.then(|| vec![T::zero(); dout.len()]);
    let m = (n * plane) as f64;
    let slice = |s: usize, ch: usize| (s * c + ch) * plane..(s * c + ch + 1) * plane;
    for ch in 0..c {
        let sum_dy: f64 = (0..n).map(|s| lane_sum(&dout[slice(s, ch)], |v| v)).sum();
        let sum_dy_xhat: f64 = (0..n)
            .map(|s| lane_dot(&dout[slice(s, ch)], &saved.xhat[slice(s, ch)]))
            .sum();
        dgamma[ch] += T::from_f64(sum_dy_xhat);
        dbeta[ch] += T::from_f64(sum_dy);
        if let Some(dx) = dx.as_mut() {
            let scale = gamma[ch] * saved.inv_std[ch];
            let (mean_dy, mean_dy_xhat) = if saved.train {
                (T::from_f64(sum_dy / m), T::from_f64(sum_dy_xhat / m))
            } else {
                (T::zero(), T::zero())
            };
            for s in 0..n {
                let r = slice(s, ch);
                for ((d, &dy), &h) in dx[r.clone()]
                    .iter_mut()
                    .zip(&dout[r.clone()])
                    .zip(&saved.xhat[r])
                {
                    *d = scale * (dy - mean_dy - h * mean_dy_xhat);
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of `[n, k]` logits using max subtraction.
pub(crate) fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / z);
    }
    out
}

/// Mean negative log-likelihood computed through log-sum-exp.
pub(crate) fn cross_entropy<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> T {
    let n = labels.len();
    let mut total = T::zero();
    for (row, &y) in logits.chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total += lse - row[y];
    }
    total / T::from_f64(n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn geom(c: usize, h: usize, kh: usize, stride: usize, pad: usize) -> ConvGeom {
        let ho = conv2d_output_size(h, kh, stride, pad).unwrap();
        ConvGeom {
            c,
            h,
            w: h,
            kh,
            kw: kh,
            stride,
            pad,
            ho,
            wo: ho,
        }
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Input index read by output `(o, oy, ox)` at tap `(c, i, j)`, if in bounds.
    fn tap(g: &ConvGeom, c: usize, oy: usize, ox: usize, i: usize, j: usize) -> Option<usize> {
        let iy = (oy * g.stride + i)
            .checked_sub(g.pad)
            .filter(|&v| v < g.h)?;
        let ix = (ox * g.stride + j)
            .checked_sub(g.pad)
            .filter(|&v| v < g.w)?;
        Some((c * g.h + iy) * g.w + ix)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let shapes = [
            (3, 6, 3, 1, 1),
            (2, 7, 3, 1, 0),
            (2, 8, 5, 1, 2),
            (3, 8, 3, 2, 1),
            (4, 6, 1, 1, 0),
            (2, 6, 1, 2, 0),
        ];
        for (t, &(c, h, kh, stride, pad)) in shapes.iter().enumerate() {
            let g = geom(c, h, kh, stride, pad);
            let (n, kout) = (2, 3);
            let x = rand_vec(n * c * h * h, t as u64);
            let k = rand_vec(kout * c * kh * kh, 100 + t as u64);
            let dout = rand_vec(n * kout * g.ho * g.wo, 200 + t as u64);
            let y = conv2d_forward(&x, n, &k, kout, &g);
            let mut dk = vec![0.0; k.len()];
            let dx = conv2d_backward(&x, n, &k, kout, &g, &dout, true, Some(&mut dk)).unwrap();
            let mut y_ref = vec![0.0; y.len()];
            let mut dx_ref = vec![0.0; x.len()];
            let mut dk_ref = vec![0.0; k.len()];
            for s in 0..n {
                let xs = &x[s * c * h * h..];
                for o in 0..kout {
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            let yi = ((s * kout + o) * g.ho + oy) * g.wo + ox;
                            for ci in 0..c {
                                for i in 0..kh {
                                    for j in 0..kh {
                                        if let Some(xi) = tap(&g, ci, oy, ox, i, j) {
                                            let ki = ((o * c + ci) * kh + i) * kh + j;
                                            y_ref[yi] += k[ki] * xs[xi];
                                            dx_ref[s * c * h * h + xi] += k[ki] * dout[yi];
                                            dk_ref[ki] += xs[xi] * dout[yi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (name, got, want) in [
                ("y", &y, &y_ref),
                ("dx", &dx, &dx_ref),
                ("dk", &dk, &dk_ref),
            ] {
                for (a, b) in got.iter().zip(want.iter()) {
                    assert!(
                        (a - b).abs() < 1e-12,
                        "{name} mismatch for shape {t}: {a} vs {b}"
                    );
                }
            }
        }
    }
}
