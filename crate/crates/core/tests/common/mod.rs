//! Independent test oracles: literal transcriptions of the metric, loss and
//! selection definitions, written without reusing library internals, plus
//! random-instance generators and a central finite-difference helper.

#![allow(dead_code)]

use csrda::data::{DomainDataset, DomainTag, ImageTensor, Sample};
use csrda::stage_b::CLSConfig;
use csrda::tensor::Plane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random binary gt with 1-3 rectangles or ellipses; never empty or full.
pub fn random_gt(r: &mut impl Rng, h: usize, w: usize) -> Plane<f64> {
    loop {
        let mut gt = Plane::filled(h, w, 0.0);
        for _ in 0..r.gen_range(1..=3) {
            let (cy, cx) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
            let (ry, rx) = (
                r.gen_range(1.0..h as f64 / 2.5),
                r.gen_range(1.0..w as f64 / 2.5),
            );
            let ellipse = r.gen_bool(0.5);
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    let inside = if ellipse {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        gt.set(y, x, 1.0);
                    }
                }
            }
        }
        let m = gt.mean();
        if m > 0.0 && m < 1.0 {
            return gt;
        }
    }
}

/// Random prediction: a noisy version of `gt`, sometimes quantized to
/// `k / 255`, with exact 0s and 1s sprinkled in.
pub fn random_pred(r: &mut impl Rng, gt: &Plane<f64>) -> Plane<f64> {
    let quantize = r.gen_bool(0.5);
    let noise = r.gen_range(0.05..0.6);
    let data = gt
        .data
        .iter()
        .map(|&g| {
            let roll: f64 = r.gen();
            let v = if roll < 0.05 {
                0.0
            } else if roll < 0.1 {
                1.0
            } else {
                (g * (1.0 - noise) + r.gen::<f64>() * noise).clamp(0.0, 1.0)
            };
            if quantize {
                (v * 255.0).round() / 255.0
            } else {
                v
            }
        })
        .collect();
    Plane::from_vec(gt.height, gt.width, data)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- metrics

pub fn oracle_mae(pred: &Plane<f64>, gt: &Plane<f64>) -> f64 {
    let d: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g).abs())
        .collect();
    mean(&d)
}

fn binary_at(pred: &Plane<f64>, t: f64) -> Vec<f64> {
    pred.data
        .iter()
        .map(|&p| if p >= t && p > 0.0 { 1.0 } else { 0.0 })
        .collect()
}

fn f_of_binary(bin: &[f64], gt: &[f64]) -> f64 {
    let tp: f64 = bin.iter().zip(gt).map(|(b, g)| b * g).sum();
    let pred_pos: f64 = bin.iter().sum();
    let gt_pos: f64 = gt.iter().sum();
    let precision = if pred_pos == 0.0 { 0.0 } else { tp / pred_pos };
    let recall = if gt_pos == 0.0 { 0.0 } else { tp / gt_pos };
    let b2 = 0.3;
    if b2 * precision + recall == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (b2 * precision + recall)
    }
}

/// Per-pixel enhanced alignment of a binary map.
fn e_of_binary(bin: &[f64], gt: &[f64]) -> f64 {
    let n = gt.len() as f64;
    let gt_sum: f64 = gt.iter().sum();
    let enhanced: Vec<f64> = if gt_sum == 0.0 {
        bin.iter().map(|b| 1.0 - b).collect()
    } else if gt_sum == n {
        bin.to_vec()
    } else {
        let mb = mean(bin);
        let mg = mean(gt);
        bin.iter()
            .zip(gt)
            .map(|(b, g)| {
                let af = b - mb;
                let ag = g - mg;
                let align = 2.0 * ag * af / (ag * ag + af * af + f64::EPSILON);
                (align + 1.0).powi(2) / 4.0
            })
            .collect()
    };
    mean(&enhanced)
}

/// `(adaptive, mean, max)` of a per-binary-map score.
fn sweep_scores(
    pred: &Plane<f64>,
    gt: &Plane<f64>,
    score: fn(&[f64], &[f64]) -> f64,
) -> (f64, f64, f64) {
    let scores: Vec<f64> = (0..=255)
        .map(|i| score(&binary_at(pred, i as f64 / 255.0), &gt.data))
        .collect();
    let adaptive_t = (2.0 * mean(&pred.data)).min(1.0);
    (
        score(&binary_at(pred, adaptive_t), &gt.data),
        mean(&scores),
        scores.iter().cloned().fold(f64::MIN, f64::max),
    )
}

pub fn oracle_f(pred: &Plane<f64>, gt: &Plane<f64>) -> (f64, f64, f64) {
    sweep_scores(pred, gt, f_of_binary)
}

pub fn oracle_e(pred: &Plane<f64>, gt: &Plane<f64>) -> (f64, f64, f64) {
    sweep_scores(pred, gt, e_of_binary)
}

fn sub(p: &Plane<f64>, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            v.push(p.get(r, c));
        }
    }
    v
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = mean(pred);
    let y = mean(gt);
    let d = if n > 1.0 { n - 1.0 } else { 1.0 };
    let sx2 = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
    let sy2 = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
    let sxy = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - x) * (g - y))
        .sum::<f64>()
        / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn object(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

/// Structure measure, α = 0.5, transcribed with 1-based centroid indexing
/// and explicit quadrant copies.
pub fn oracle_s(pred: &Plane<f64>, gt: &Plane<f64>) -> f64 {
    let y = mean(&gt.data);
    let q = if y == 0.0 {
        1.0 - mean(&pred.data)
    } else if y == 1.0 {
        mean(&pred.data)
    } else {
        let fg: Vec<f64> = pred
            .data
            .iter()
            .zip(&gt.data)
            .filter(|(_, &g)| g == 1.0)
            .map(|(&p, _)| p)
            .collect();
        let bg: Vec<f64> = pred
            .data
            .iter()
            .zip(&gt.data)
            .filter(|(_, &g)| g == 0.0)
            .map(|(&p, _)| 1.0 - p)
            .collect();
        let so = y * object(&fg) + (1.0 - y) * object(&bg);

        let (rows, cols) = gt.shape();
        // centroid of the foreground coordinate list, rounded, plus one
        let coords: Vec<(f64, f64)> = (0..rows * cols)
            .filter(|&i| gt.data[i] == 1.0)
            .map(|i| ((i / cols) as f64, (i % cols) as f64))
            .collect();
        let cy = (coords.iter().map(|c| c.0).sum::<f64>() / coords.len() as f64).round_ties_even()
            as usize
            + 1;
        let cx = (coords.iter().map(|c| c.1).sum::<f64>() / coords.len() as f64).round_ties_even()
            as usize
            + 1;
        let (cy, cx) = (cy.min(rows), cx.min(cols));
        let area = (rows * cols) as f64;
        let parts = [
            ((cx * cy) as f64 / area, (0, cy, 0, cx)),
            (((cols - cx) * cy) as f64 / area, (0, cy, cx, cols)),
            ((cx * (rows - cy)) as f64 / area, (cy, rows, 0, cx)),
            (
                ((cols - cx) * (rows - cy)) as f64 / area,
                (cy, rows, cx, cols),
            ),
        ];
        let mut sr = 0.0;
        for (wt, (r0, r1, c0, c1)) in parts {
            if r1 > r0 && c1 > c0 {
                sr += wt * ssim(&sub(pred, r0, r1, c0, c1), &sub(gt, r0, r1, c0, c1));
            }
        }
        0.5 * so + 0.5 * sr
    };
    q.max(0.0)
}

/// Nearest foreground pixel by exhaustive search, ties to the smaller flat
/// index.
pub fn oracle_nearest(gt: &Plane<f64>) -> Vec<(f64, usize)> {
    let (h, w) = gt.shape();
    (0..h * w)
        .map(|i| {
            (0..h * w)
                .filter(|&j| gt.data[j] == 1.0)
                .map(|j| {
                    let dy = (i / w) as f64 - (j / w) as f64;
                    let dx = (i % w) as f64 - (j % w) as f64;
                    (dy * dy + dx * dx, j)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .map(|(d2, j)| (d2.sqrt(), j))
                .unwrap()
        })
        .collect()
}

/// Weighted F-measure (β² = 1): Gaussian-smoothed error propagation (7×7,
/// σ = 5, zero padding) with background weight `bg_weight(d)`.
pub fn oracle_wf(pred: &Plane<f64>, gt: &Plane<f64>, bg_weight: fn(f64) -> f64) -> f64 {
    let (h, w) = gt.shape();
    let e: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g).abs())
        .collect();
    let near = oracle_nearest(gt);
    let et: Vec<f64> = (0..h * w)
        .map(|i| {
            if gt.data[i] == 1.0 {
                e[i]
            } else {
                e[near[i].1]
            }
        })
        .collect();
    let mut k = [[0.0f64; 7]; 7];
    let mut ks = 0.0;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (y, x) = (a as f64 - 3.0, b as f64 - 3.0);
            *v = (-(x * x + y * y) / 50.0).exp();
            ks += *v;
        }
    }
    // mirror-padded copy: each border row/column is repeated outward as
    // in `d c b a | a b c d`
    let mirror = |i: isize, n: usize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n as isize {
                i = 2 * n as isize - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let (ph, pw) = (h + 6, w + 6);
    let padded: Vec<f64> = (0..ph * pw)
        .map(|j| et[mirror((j / pw) as isize - 3, h) * w + mirror((j % pw) as isize - 3, w)])
        .collect();
    let mut ea = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for a in 0..7 {
                for b in 0..7 {
                    acc += k[a][b] / ks * padded[(y + a) * pw + x + b];
                }
            }
            ea[y * w + x] = acc;
        }
    }
    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        let g = gt.data[i] == 1.0;
        let m = if g && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if g { 1.0 } else { bg_weight(near[i].0) };
        ew[i] = m * b;
    }
    let n_fg: f64 = gt.data.iter().sum();
    let ew_fg: f64 = (0..h * w)
        .filter(|&i| gt.data[i] == 1.0)
        .map(|i| ew[i])
        .sum();
    let tpw = n_fg - ew_fg;
    let fpw: f64 = (0..h * w)
        .filter(|&i| gt.data[i] == 0.0)
        .map(|i| ew[i])
        .sum();
    let r = 1.0 - ew_fg / n_fg;
    let p = tpw / (f64::EPSILON + tpw + fpw);
    2.0 * r * p / (f64::EPSILON + r + p)
}

pub fn decay_weight(d: f64) -> f64 {
    0.5f64.powf(d / 5.0).min(1.0)
}

pub fn margolin_weight(d: f64) -> f64 {
    2.0 - (0.5f64.ln() / 5.0 * d).exp()
}

// ------------------------------------------------------------- selection

/// Brute-force confident label selection: returns selected indices.
pub fn oracle_cls(scores: &[f64], probs: &[Vec<f64>], mu: f64, tau: f64) -> Vec<usize> {
    let n = scores.len() as f64;
    let expectation = scores.iter().sum::<f64>() / n;
    (0..scores.len())
        .filter(|&i| scores[i] <= mu * expectation)
        .filter(|&i| {
            let kept: Vec<f64> = probs[i]
                .iter()
                .map(|&p| if p < tau { 0.0 } else { p })
                .filter(|&p| p > 0.0)
                .collect();
            !kept.is_empty() && mean(&kept) >= tau
        })
        .collect()
}

// ---------------------------------------------------------------- losses

/// Sobel magnitude with replicate padding, by direct 3×3 correlation.
pub fn oracle_sobel(p: &Plane<f64>) -> Plane<f64> {
    let (h, w) = p.shape();
    let at = |y: isize, x: isize| {
        p.get(
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
        )
    };
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    Plane::from_fn(h, w, |y, x| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for a in 0..3 {
            for b in 0..3 {
                let v = at(y as isize + a as isize - 1, x as isize + b as isize - 1);
                gx += kx[a][b] * v;
                gy += ky[a][b] * v;
            }
        }
        (gx * gx + gy * gy).sqrt()
    })
}

// ------------------------------------------------------ finite differences

/// Central-difference check of `grad` against `f` on `coords`, step `h`.
/// Returns the worst relative error `|fd − g| / max(|fd|, |g|, floor)`.
pub fn fd_check(
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    step: f64,
    floor: f64,
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

// ---------------------------------------------------------------- selection instances

const CLS_SIZE: usize = 16;

/// Random selection problem: ≤ 20 samples, scores with deliberate ties,
/// teacher maps of varied confidence and a random `(μ, τ)`.
pub struct Instance {
    pub target: DomainDataset,
    pub scores: Vec<f64>,
    pub probs: Vec<Plane<f32>>,
    pub cfg: CLSConfig,
}

pub fn cls_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.gen_range(1..=20);
    let samples = (0..n)
        .map(|i| {
            let img = ImageTensor::new(
                CLS_SIZE,
                CLS_SIZE,
                (0..3 * CLS_SIZE * CLS_SIZE).map(|_| r.gen()).collect(),
            )
            .unwrap();
            Sample::new(format!("t{i:02}"), img, None, DomainTag::Target).unwrap()
        })
        .collect();
    // a few repeated values make ties with the threshold likely
    let palette: Vec<f64> = (0..4).map(|_| r.gen_range(0.0..2.0)).collect();
    let scores = (0..n)
        .map(|_| {
            if r.gen_bool(0.3) {
                palette[r.gen_range(0..4)]
            } else {
                r.gen_range(0.0..2.0)
            }
        })
        .collect();
    let probs = (0..n)
        .map(|_| {
            let level: f32 = r.gen();
            Plane::from_fn(CLS_SIZE, CLS_SIZE, |_, _| {
                (level * r.gen::<f32>() * 1.6).min(1.0)
            })
        })
        .collect();
    let cfg = CLSConfig {
        mu: r.gen_range(0.3..1.5),
        tau: r.gen_range(0.0..1.0),
    };
    Instance {
        target: DomainDataset::new("t", samples).unwrap(),
        scores,
        probs,
        cfg,
    }
}
