//! Forward and backward kernels for the layers of the toy encoder-decoder.
//!
//! Feature maps are channel-major (`C×H×W`) slices of a single sample.

use crate::tensor::{matmul, Real};

pub const GN_EPS: f64 = 1e-5;

/// Unfolds a 3×3, zero-padded neighbourhood: `col[(c·9 + k)·HW + p]`.
pub fn im2col3<T: Real>(input: &[T], channels: usize, h: usize, w: usize, col: &mut Vec<T>) {
    let hw = h * w;
    col.clear();
    col.resize(channels * 9 * hw, T::zero());
    for c in 0..channels {
        let src = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut row[y * w..(y + 1) * w];
                    // x range where sx = x + kx - 1 is inside [0, w)
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for x in x0..x1 {
                        drow[x] = srow[x + kx - 1];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates `col` back into `out`.
pub fn col2im3<T: Real>(col: &[T], channels: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    for c in 0..channels {
        let dst = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &row[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let (x0, x1) = match kx {
                        0 => (1, w),
                        1 => (0, w),
                        _ => (0, w - 1),
                    };
                    for x in x0..x1 {
                        drow[x + kx - 1] += srow[x];
                    }
                }
            }
        }
    }
}

/// 3×3 same-padding convolution without bias. `weight` is `cout × (cin·9)`.
pub fn conv3_forward<T: Real>(
    weight: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    input: &[T],
    col: &mut Vec<T>,
    out: &mut [T],
) {
    im2col3(input, cin, h, w, col);
    matmul(cout, cin * 9, h * w, weight, false, col, false, out, false);
}

/// Accumulates the weight gradient and, when requested, writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv3_backward<T: Real>(
    weight: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    col: &[T],
    dout: &[T],
    dweight: &mut [T],
    dinput: Option<&mut [T]>,
) {
    let k = cin * 9;
    let hw = h * w;
    matmul(cout, hw, k, dout, false, col, true, dweight, true);
    if let Some(din) = dinput {
        let mut dcol = vec![T::zero(); k * hw];
        matmul(k, cout, hw, weight, true, dout, false, &mut dcol, false);
        din.iter_mut().for_each(|v| *v = T::zero());
        col2im3(&dcol, cin, h, w, din);
    }
}

pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// In-place group normalisation with per-channel affine transform.
pub fn group_norm_forward<T: Real>(
    x: &mut [T],
    channels: usize,
    groups: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
) -> GroupNormCache<T> {
    let cpg = channels / groups;
    let n = T::lit((cpg * hw) as f64);
    let eps = T::lit(GN_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); groups];
    for g in 0..groups {
        let r = g * cpg * hw..(g + 1) * cpg * hw;
        let seg = &x[r.clone()];
        let mean = seg.iter().copied().sum::<T>() / n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[g] = is;
        for (xh, &v) in xhat[r.clone()].iter_mut().zip(seg) {
            *xh = (v - mean) * is;
        }
        for c in g * cpg..(g + 1) * cpg {
            let (ga, be) = (gamma[c], beta[c]);
            for p in c * hw..(c + 1) * hw {
                x[p] = ga * xhat[p] + be;
            }
        }
    }
    GroupNormCache { xhat, inv_std }
}

/// Turns `dy` into `dx` in place and accumulates affine gradients.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    dy: &mut [T],
    cache: &GroupNormCache<T>,
    channels: usize,
    groups: usize,
    hw: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let cpg = channels / groups;
    let n = T::lit((cpg * hw) as f64);
    for c in 0..channels {
        let r = c * hw..(c + 1) * hw;
        let mut sg = T::zero();
        let mut sb = T::zero();
        for (d, xh) in dy[r.clone()].iter().zip(&cache.xhat[r.clone()]) {
            sg += *d * *xh;
            sb += *d;
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
        for d in &mut dy[r] {
            *d *= gamma[c];
        }
    }
    for g in 0..groups {
        let r = g * cpg * hw..(g + 1) * cpg * hw;
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for (d, xh) in dy[r.clone()].iter().zip(&cache.xhat[r.clone()]) {
            sum += *d;
            sum_x += *d * *xh;
        }
        let is = cache.inv_std[g];
        for (d, xh) in dy[r.clone()].iter_mut().zip(&cache.xhat[r]) {
            *d = is / n * (n * *d - sum - *xh * sum_x);
        }
    }
}

pub fn relu_forward<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` where the forward output was not positive.
pub fn relu_backward<T: Real>(out: &[T], dy: &mut [T]) {
    for (d, &o) in dy.iter_mut().zip(out) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2×2 max pooling; returns pooled values and flat argmax positions.
pub fn maxpool2_forward<T: Real>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); channels * oh * ow];
    let mut arg = vec![0u32; channels * oh * ow];
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[p] > input[best] {
                        best = p;
                    }
                }
                let o = (c * oh + y) * ow + x;
                out[o] = input[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(dout: &[T], arg: &[u32], dx: &mut [T]) {
    for (d, &a) in dout.iter().zip(arg) {
        dx[a as usize] += *d;
    }
}

/// Source taps for ×2 bilinear upsampling (half-pixel centres, edge clamped).
pub fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample2_forward<T: Real>(x: &[T], channels: usize, h: usize, w: usize, out: &mut [T]) {
    let ty = upsample_taps(h);
    let tx: Vec<(usize, usize, T, T)> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb)))
        .collect();
    let (oh, ow) = (2 * h, 2 * w);
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                drow[ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
}

/// Adjoint of [`upsample2_forward`]; overwrites `dx`.
pub fn upsample2_backward<T: Real>(dout: &[T], channels: usize, h: usize, w: usize, dx: &mut [T]) {
    let ty = upsample_taps(h);
    let tx: Vec<(usize, usize, T, T)> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb)))
        .collect();
    let (oh, ow) = (2 * h, 2 * w);
    dx.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..channels {
        let src = &dout[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            let srow = &src[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = srow[ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
}
