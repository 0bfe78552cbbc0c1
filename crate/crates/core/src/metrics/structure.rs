//! Structure measure: object- and region-aware similarity with α = 0.5.

use super::check_pair;
use crate::error::Result;
use crate::tensor::Plane;

pub const ALPHA: f64 = 0.5;

pub fn s_measure(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<f64> {
    check_pair(pred, gt)?;
    let y = gt.mean();
    let score = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        ALPHA * object_score(pred, gt) + (1.0 - ALPHA) * region_score(pred, gt)
    };
    Ok(score.max(0.0))
}

/// `2x / (x² + 1 + σ + eps)` over the pixels selected by `mask`, σ the
/// sample standard deviation (0 for a single pixel).
fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let x = values.clone().sum::<f64>() / n;
    let sigma = if n > 1.0 {
        (values.map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn object_score(pred: &Plane<f64>, gt: &Plane<f64>) -> f64 {
    let u = gt.mean();
    let pairs = || pred.data.iter().zip(&gt.data);
    let fg = object_similarity(pairs().filter(|(_, &g)| g == 1.0).map(|(&p, _)| p));
    let bg = object_similarity(pairs().filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p));
    u * fg + (1.0 - u) * bg
}

/// Split point `(x, y)`: the rounded foreground centroid plus one, so the
/// left/top quadrants span columns `0..x` and rows `0..y`.
fn centroid(gt: &Plane<f64>) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for r in 0..gt.height {
        for c in 0..gt.width {
            if gt.get(r, c) != 0.0 {
                sy += r as f64;
                sx += c as f64;
                n += 1.0;
            }
        }
    }
    if n == 0.0 {
        return (
            (gt.width as f64 / 2.0).round_ties_even() as usize + 1,
            (gt.height as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    (
        (sx / n).round_ties_even() as usize + 1,
        (sy / n).round_ties_even() as usize + 1,
    )
}

fn region_ssim(
    pred: &Plane<f64>,
    gt: &Plane<f64>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> f64 {
    let n = (rows.len() * cols.len()) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let cells: Vec<(f64, f64)> = rows
        .flat_map(|r| cols.clone().map(move |c| (r, c)))
        .map(|(r, c)| (pred.get(r, c), gt.get(r, c)))
        .collect();
    let x = cells.iter().map(|(p, _)| p).sum::<f64>() / n;
    let y = cells.iter().map(|(_, g)| g).sum::<f64>() / n;
    // one-pixel quadrants have zero spread
    let dof = (n - 1.0).max(1.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(p, g) in &cells {
        sxx += (p - x) * (p - x);
        syy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let (sxx, syy, sxy) = (sxx / dof, syy / dof, sxy / dof);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(pred: &Plane<f64>, gt: &Plane<f64>) -> f64 {
    let (h, w) = gt.shape();
    let (x, y) = centroid(gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (w1, 0..y, 0..x),
        (w2, 0..y, x..w),
        (w3, y..h, 0..x),
        (w4, y..h, x..w),
    ];
    quads
        .into_iter()
        .filter(|(wt, rows, cols)| *wt > 0.0 && !rows.is_empty() && !cols.is_empty())
        .map(|(wt, rows, cols)| wt * region_ssim(pred, gt, rows, cols))
        .sum()
}
