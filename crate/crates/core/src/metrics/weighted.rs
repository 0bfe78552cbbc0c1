//! Weighted F-measure with Gaussian error dependency and distance-based
//! background weighting.

use serde::{Deserialize, Serialize};

use super::{check_pair, count_fg};
use crate::error::{Error, Result};
use crate::tensor::Plane;

pub const GAUSS_SIGMA: f64 = 5.0;
pub const GAUSS_SIZE: usize = 7;
/// Distance (px) at which the background weight reaches its half-way value.
pub const DIST_SCALE: f64 = 5.0;

/// How background errors are weighted by their distance to the object.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundWeighting {
    /// `min(1, 0.5^(d/5))`: far false positives count less.
    #[default]
    Decay,
    /// `2 − 0.5^(d/5)`: far false positives count more (Margolin et al.).
    Margolin,
}

impl BackgroundWeighting {
    pub fn weight(self, dist: f64) -> f64 {
        let decay = (0.5f64.ln() / DIST_SCALE * dist).exp();
        match self {
            Self::Decay => decay.min(1.0),
            Self::Margolin => 2.0 - decay,
        }
    }
}

/// Normalized `size × size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Euclidean distance from every pixel to the nearest foreground pixel and
/// that pixel's flat index. Ties resolve to the smallest `(row, col)`.
/// Foreground pixels map to themselves at distance 0.
pub fn nearest_foreground(gt: &Plane<f64>) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = gt.shape();
    let fg: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| gt.data[i] > 0.5)
        .map(|i| (i / w, i % w))
        .collect();
    let mut dist = vec![f64::INFINITY; h * w];
    let mut idx = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gt.data[i] > 0.5 {
                dist[i] = 0.0;
                idx[i] = i;
                continue;
            }
            let mut best = (usize::MAX, usize::MAX);
            // `fg` is row-major so the first strict minimum wins ties.
            for &(fy, fx) in &fg {
                let d2 = fy.abs_diff(y).pow(2) + fx.abs_diff(x).pow(2);
                if d2 < best.0 {
                    best = (d2, fy * w + fx);
                }
            }
            if best.1 != usize::MAX {
                dist[i] = (best.0 as f64).sqrt();
                idx[i] = best.1;
            }
        }
    }
    (dist, idx)
}

/// Index `i` folded into `0..n` by half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// 2-D correlation with a square odd kernel and symmetric-reflect borders,
/// so a normalized kernel leaves constant fields unchanged.
fn convolve_same(src: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let r = size as isize / 2;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..size {
                let yy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..size {
                    let xx = reflect(x as isize + kx as isize - r, w);
                    acc += kernel[ky * size + kx] * src[yy * w + xx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn weighted_f_measure(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<f64> {
    weighted_f_measure_with(pred, gt, BackgroundWeighting::default())
}

pub fn weighted_f_measure_with(
    pred: &Plane<f64>,
    gt: &Plane<f64>,
    weighting: BackgroundWeighting,
) -> Result<f64> {
    check_pair(pred, gt)?;
    let n_fg = count_fg(gt);
    if n_fg == 0 {
        return Err(Error::InvalidMask(
            "weighted F-measure needs a non-empty ground truth".into(),
        ));
    }
    let (h, w) = gt.shape();
    let is_fg = |i: usize| gt.data[i] > 0.5;
    let err: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g).abs())
        .collect();
    let (dist, nearest) = nearest_foreground(gt);
    let et: Vec<f64> = (0..h * w).map(|i| err[nearest[i]]).collect();
    let ea = convolve_same(
        &et,
        h,
        w,
        &gaussian_kernel(GAUSS_SIZE, GAUSS_SIGMA),
        GAUSS_SIZE,
    );

    let (mut sum_fg, mut fp) = (0.0, 0.0);
    for i in 0..h * w {
        if is_fg(i) {
            sum_fg += if ea[i] < err[i] { ea[i] } else { err[i] };
        } else {
            fp += err[i] * weighting.weight(dist[i]);
        }
    }
    let n_fg = n_fg as f64;
    let tp = n_fg - sum_fg;
    let recall = 1.0 - sum_fg / n_fg;
    let precision = tp / (tp + fp + f64::EPSILON);
    Ok(2.0 * recall * precision / (recall + precision + f64::EPSILON))
}
