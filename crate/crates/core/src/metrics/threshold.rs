//! Threshold-swept F-measure and E-measure.
//!
//! A pixel is predicted foreground at threshold `t` iff `p ≥ t` and `p > 0`,
//! so an all-zero prediction is empty at every threshold.

use super::{check_pair, count_fg};
use crate::error::Result;
use crate::tensor::Plane;

/// β² for the thresholded F-measure.
pub const BETA2: f64 = 0.3;
/// Number of sweep thresholds `i / 255`, `i = 0..=255`.
pub const N_THRESHOLDS: usize = 256;

/// Adaptive / mean / max triple over the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdScores {
    pub adaptive: f64,
    pub mean: f64,
    pub max: f64,
}

#[inline]
pub(crate) fn is_positive(p: f64, t: f64) -> bool {
    p >= t && p > 0.0
}

pub fn adaptive_threshold(pred: &Plane<f64>) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

/// Confusion counts `[tp, fp]` at every sweep threshold plus the gt count.
struct Sweep {
    tp: [f64; N_THRESHOLDS],
    fp: [f64; N_THRESHOLDS],
    n_fg: f64,
    n: f64,
}

/// Largest `i` with `i / 255 ≤ p`, or `None` when `p` is never positive.
fn bin_of(p: f64) -> Option<usize> {
    if p <= 0.0 {
        return None;
    }
    let mut i = ((p * 255.0).floor() as usize).min(255);
    while i < 255 && ((i + 1) as f64 / 255.0) <= p {
        i += 1;
    }
    while i > 0 && (i as f64 / 255.0) > p {
        i -= 1;
    }
    Some(i)
}

fn sweep(pred: &Plane<f64>, gt: &Plane<f64>) -> Sweep {
    let mut fg_hist = [0u64; N_THRESHOLDS];
    let mut bg_hist = [0u64; N_THRESHOLDS];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if let Some(b) = bin_of(p) {
            if g > 0.5 {
                fg_hist[b] += 1;
            } else {
                bg_hist[b] += 1;
            }
        }
    }
    let mut tp = [0.0; N_THRESHOLDS];
    let mut fp = [0.0; N_THRESHOLDS];
    let (mut ct, mut cf) = (0u64, 0u64);
    for i in (0..N_THRESHOLDS).rev() {
        ct += fg_hist[i];
        cf += bg_hist[i];
        tp[i] = ct as f64;
        fp[i] = cf as f64;
    }
    Sweep {
        tp,
        fp,
        n_fg: count_fg(gt) as f64,
        n: pred.len() as f64,
    }
}

fn confusion_at(pred: &Plane<f64>, gt: &Plane<f64>, t: f64) -> (f64, f64) {
    let (mut tp, mut fp) = (0.0, 0.0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if is_positive(p, t) {
            if g > 0.5 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
    }
    (tp, fp)
}

pub(crate) fn f_from_counts(tp: f64, fp: f64, n_fg: f64) -> f64 {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if n_fg > 0.0 { tp / n_fg } else { 0.0 };
    let denom = BETA2 * precision + recall;
    if denom > 0.0 {
        (1.0 + BETA2) * precision * recall / denom
    } else {
        0.0
    }
}

/// Mean enhanced-alignment value for a binarized prediction summarized by
/// its confusion counts.
pub(crate) fn e_from_counts(tp: f64, fp: f64, n_fg: f64, n: f64) -> f64 {
    let n_pred = tp + fp;
    if n_fg == 0.0 {
        return (n - n_pred) / n;
    }
    if n_fg == n {
        return n_pred / n;
    }
    let fn_ = n_fg - tp;
    let tn = n - n_fg - fp;
    let mg = n_fg / n;
    let mp = n_pred / n;
    let enhanced = |g: f64, p: f64| {
        let (a, b) = (g - mg, p - mp);
        let xi = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
        (xi + 1.0) * (xi + 1.0) / 4.0
    };
    (tp * enhanced(1.0, 1.0)
        + fp * enhanced(0.0, 1.0)
        + fn_ * enhanced(1.0, 0.0)
        + tn * enhanced(0.0, 0.0))
        / n
}

fn reduce(
    pred: &Plane<f64>,
    gt: &Plane<f64>,
    score: impl Fn(f64, f64, f64, f64) -> f64,
) -> ThresholdScores {
    let s = sweep(pred, gt);
    let (mut sum, mut max) = (0.0, f64::NEG_INFINITY);
    for i in 0..N_THRESHOLDS {
        let v = score(s.tp[i], s.fp[i], s.n_fg, s.n);
        sum += v;
        max = max.max(v);
    }
    let (tp, fp) = confusion_at(pred, gt, adaptive_threshold(pred));
    ThresholdScores {
        adaptive: score(tp, fp, s.n_fg, s.n),
        mean: sum / N_THRESHOLDS as f64,
        max,
    }
}

/// F-measure (β² = 0.3) at the adaptive threshold and over the sweep.
pub fn f_measure(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<ThresholdScores> {
    check_pair(pred, gt)?;
    Ok(reduce(pred, gt, |tp, fp, n_fg, _| {
        f_from_counts(tp, fp, n_fg)
    }))
}

/// Enhanced-alignment measure at the adaptive threshold and over the sweep.
pub fn e_measure(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<ThresholdScores> {
    check_pair(pred, gt)?;
    Ok(reduce(pred, gt, e_from_counts))
}
