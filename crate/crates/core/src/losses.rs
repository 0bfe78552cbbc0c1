//! Supervised BCE, the Sobel edge operator, and the edge-aware
//! saliency-weighted (ES) consistency loss.
//!
//! Every loss takes probability maps and returns its value together with the
//! gradient with respect to the *student logits*; teacher inputs are treated
//! as constants. Values are pixel means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Plane, Real};

/// Probability clamp used inside the logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Smoothing of `|u|` in the edge-alignment gradient (`u / sqrt(u² + ε²)`).
pub const L1_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ESConfig {
    /// Weight of the edge-alignment term.
    pub alpha: f64,
    /// Weight of the saliency-weighted term.
    pub beta: f64,
    /// Offset added to the pseudo label to form the pixel weights.
    pub delta: f64,
}

impl Default for ESConfig {
    fn default() -> Self {
        Self::s2c()
    }
}

impl ESConfig {
    pub fn s2c() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.3,
            delta: 0.5,
        }
    }

    pub fn c2c() -> Self {
        Self {
            alpha: 0.7,
            ..Self::s2c()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.delta]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(format!(
                "ES weights must be finite and ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the student logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Plane<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsTerms<T> {
    pub ea: f64,
    pub sw: f64,
    pub es: f64,
    pub grad: Plane<T>,
}

/// Batch-level loss summary; `per_sample_es` follows target-batch order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub ea: f64,
    pub sw: f64,
    pub es: f64,
    pub per_sample_es: Vec<f64>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.ce + self.es
    }
}

fn same_shape<T>(a: &Plane<T>, b: &Plane<T>, what: &str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            id: what.to_owned(),
            expected: (a.height, a.width),
            actual: (b.height, b.width),
        });
    }
    Ok(())
}

#[inline]
fn xent<T: Real>(p: T, t: T) -> f64 {
    let eps = BCE_EPS;
    let p = p.f64().clamp(eps, 1.0 - eps);
    let t = t.f64();
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean binary cross-entropy against a (possibly soft) target.
pub fn bce_loss<T: Real>(pred: &Plane<T>, target: &Plane<T>) -> Result<LossGrad<T>> {
    same_shape(pred, target, "bce")?;
    let n = pred.len() as f64;
    let value = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| xent(p, t))
        .sum::<f64>()
        / n;
    let inv_n = T::lit(1.0 / n);
    let grad = Plane::from_vec(
        pred.height,
        pred.width,
        pred.data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * inv_n)
            .collect(),
    );
    Ok(LossGrad { value, grad })
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Sobel responses with replicate padding.
/// Written as weighted differences so constant regions give exactly 0.
pub fn sobel_gradients<T: Real>(mask: &Plane<T>) -> (Plane<T>, Plane<T>) {
    let (h, w) = mask.shape();
    let two = T::lit(2.0);
    let mut gx = Plane::filled(h, w, T::zero());
    let mut gy = Plane::filled(h, w, T::zero());
    for y in 0..h {
        let (yu, yd) = (clamp_idx(y as isize - 1, h), clamp_idx(y as isize + 1, h));
        for x in 0..w {
            let (xl, xr) = (clamp_idx(x as isize - 1, w), clamp_idx(x as isize + 1, w));
            let v = |yy: usize, xx: usize| mask.get(yy, xx);
            let sx =
                (v(yu, xr) - v(yu, xl)) + two * (v(y, xr) - v(y, xl)) + (v(yd, xr) - v(yd, xl));
            let sy =
                (v(yd, xl) - v(yu, xl)) + two * (v(yd, x) - v(yu, x)) + (v(yd, xr) - v(yu, xr));
            gx.set(y, x, sx);
            gy.set(y, x, sy);
        }
    }
    (gx, gy)
}

/// Adjoint of [`sobel_gradients`].
fn sobel_adjoint<T: Real>(dgx: &Plane<T>, dgy: &Plane<T>) -> Plane<T> {
    let (h, w) = dgx.shape();
    let kx = SOBEL_X.map(|r| r.map(T::lit));
    let ky = SOBEL_Y.map(|r| r.map(T::lit));
    let mut out = Plane::filled(h, w, T::zero());
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = (dgx.get(y, x), dgy.get(y, x));
            if gx == T::zero() && gy == T::zero() {
                continue;
            }
            for dy in 0..3 {
                let yy = clamp_idx(y as isize + dy as isize - 1, h);
                for dx in 0..3 {
                    let xx = clamp_idx(x as isize + dx as isize - 1, w);
                    let i = yy * w + xx;
                    out.data[i] += kx[dy][dx] * gx + ky[dy][dx] * gy;
                }
            }
        }
    }
    out
}

/// Edge magnitude `sqrt(Gx² + Gy²)`.
pub fn sobel_edges<T: Real>(mask: &Plane<T>) -> Plane<T> {
    let (gx, gy) = sobel_gradients(mask);
    Plane::from_vec(
        mask.height,
        mask.width,
        gx.data
            .iter()
            .zip(&gy.data)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect(),
    )
}

/// Mean absolute difference between student and teacher edge maps.
pub fn edge_alignment_loss<T: Real>(student: &Plane<T>, teacher: &Plane<T>) -> Result<LossGrad<T>> {
    same_shape(student, teacher, "edge_alignment")?;
    let n = student.len() as f64;
    let (gx, gy) = sobel_gradients(student);
    let edges_t = sobel_edges(teacher);
    let eps2 = T::lit(L1_EPS * L1_EPS);
    let inv_n = T::lit(1.0 / n);
    let mut value = 0.0;
    let mut dgx = Plane::filled(student.height, student.width, T::zero());
    let mut dgy = dgx.clone();
    for i in 0..student.len() {
        let (a, b) = (gx.data[i], gy.data[i]);
        let mag = (a * a + b * b).sqrt();
        let diff = mag - edges_t.data[i];
        value += diff.f64().abs();
        if mag > T::zero() {
            let dmag = diff / (diff * diff + eps2).sqrt() * inv_n;
            dgx.data[i] = dmag * a / mag;
            dgy.data[i] = dmag * b / mag;
        }
    }
    let dp = sobel_adjoint(&dgx, &dgy);
    let grad = Plane::from_vec(
        student.height,
        student.width,
        dp.data
            .iter()
            .zip(&student.data)
            .map(|(&d, &p)| d * p * (T::one() - p))
            .collect(),
    );
    Ok(LossGrad {
        value: value / n,
        grad,
    })
}

/// Cross-entropy against the pseudo label, weighted per pixel by `ŷ + δ`.
pub fn saliency_weighted_loss<T: Real>(
    student: &Plane<T>,
    pseudo_label: &Plane<T>,
    delta: f64,
) -> Result<LossGrad<T>> {
    same_shape(student, pseudo_label, "saliency_weighted")?;
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::Config(format!("delta must be ≥ 0, got {delta}")));
    }
    let n = student.len() as f64;
    let value = student
        .data
        .iter()
        .zip(&pseudo_label.data)
        .map(|(&p, &t)| (t.f64() + delta) * xent(p, t))
        .sum::<f64>()
        / n;
    let d = T::lit(delta);
    let inv_n = T::lit(1.0 / n);
    let grad = Plane::from_vec(
        student.height,
        student.width,
        student
            .data
            .iter()
            .zip(&pseudo_label.data)
            .map(|(&p, &t)| (t + d) * (p - t) * inv_n)
            .collect(),
    );
    Ok(LossGrad { value, grad })
}

/// `α·L_EA + β·L_SW`, using the teacher probabilities as the pseudo label.
pub fn es_loss<T: Real>(
    student: &Plane<T>,
    teacher: &Plane<T>,
    cfg: &ESConfig,
) -> Result<EsTerms<T>> {
    cfg.validate()?;
    let ea = edge_alignment_loss(student, teacher)?;
    let sw = saliency_weighted_loss(student, teacher, cfg.delta)?;
    let (a, b) = (T::lit(cfg.alpha), T::lit(cfg.beta));
    let grad = Plane::from_vec(
        student.height,
        student.width,
        ea.grad
            .data
            .iter()
            .zip(&sw.grad.data)
            .map(|(&ge, &gs)| a * ge + b * gs)
            .collect(),
    );
    Ok(EsTerms {
        ea: ea.value,
        sw: sw.value,
        es: cfg.alpha * ea.value + cfg.beta * sw.value,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;

    fn rng_plane(seed: u64, h: usize, w: usize, lo: f64, hi: f64) -> Plane<f64> {
        let mut s = seed;
        Plane::from_fn(h, w, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            lo + (hi - lo) * ((s >> 11) as f64 / (1u64 << 53) as f64)
        })
    }

    #[test]
    fn bce_half_is_ln2() {
        let p = Plane::filled(4, 4, 0.5f64);
        let r = bce_loss(&p, &p).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(r.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bce_perfect_binary_prediction_hits_clamp_floor() {
        let t = Plane::from_fn(4, 4, |y, _| if y < 2 { 1.0f64 } else { 0.0 });
        let r = bce_loss(&t, &t).unwrap();
        assert!(r.value <= -(1.0 - BCE_EPS).ln() + 1e-15);
        assert!(r.value >= 0.0);
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let a = Plane::filled(4, 4, 0.5f64);
        let b = Plane::filled(4, 5, 0.5f64);
        assert!(matches!(bce_loss(&a, &b), Err(Error::ShapeMismatch { .. })));
        assert!(edge_alignment_loss(&a, &b).is_err());
        assert!(saliency_weighted_loss(&a, &b, 0.5).is_err());
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let e = sobel_edges(&Plane::filled(6, 7, 0.37f64));
        assert!(e.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step_peaks_at_four() {
        // 5x5, 0 for x < 2 and 1 for x >= 2
        let m = Plane::from_fn(5, 5, |_, x| if x >= 2 { 1.0f64 } else { 0.0 });
        let e = sobel_edges(&m);
        for y in 0..5 {
            assert_eq!(e.get(y, 0), 0.0);
            assert_eq!(e.get(y, 1), 4.0);
            assert_eq!(e.get(y, 2), 4.0);
            assert_eq!(e.get(y, 3), 0.0);
        }
        let peak = e.data.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, 4.0);
    }

    #[test]
    fn sobel_magnitude_is_mirror_equivariant() {
        let m = rng_plane(3, 9, 11, 0.0, 1.0);
        let a = sobel_edges(&m.flip_horizontal());
        let b = sobel_edges(&m).flip_horizontal();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_alignment_zero_for_identical_and_constant_inputs() {
        let m = rng_plane(5, 8, 8, 0.05, 0.95);
        let r = edge_alignment_loss(&m, &m).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.data.iter().all(|&g| g == 0.0));
        let r = edge_alignment_loss(&Plane::filled(8, 8, 0.9), &Plane::filled(8, 8, 0.5)).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn saliency_weights_follow_pseudo_label() {
        let p = rng_plane(9, 4, 4, 0.1, 0.9);
        let zeros = Plane::filled(4, 4, 0.0f64);
        let sw = saliency_weighted_loss(&p, &zeros, 0.5).unwrap();
        let plain = bce_loss(&p, &zeros).unwrap();
        assert!((sw.value - 0.5 * plain.value).abs() < 1e-12);

        let mut one_hot = zeros.clone();
        one_hot.set(1, 2, 1.0);
        let sw = saliency_weighted_loss(&p, &one_hot, 0.5).unwrap();
        let expected = (0..16)
            .map(|i| {
                let (y, x) = (i / 4, i % 4);
                let t = one_hot.get(y, x);
                let w = if (y, x) == (1, 2) { 1.5 } else { 0.5 };
                w * xent(p.get(y, x), t)
            })
            .sum::<f64>()
            / 16.0;
        assert!((sw.value - expected).abs() < 1e-12);
    }

    #[test]
    fn es_degenerate_weights() {
        let s = rng_plane(1, 8, 8, 0.05, 0.95);
        let t = rng_plane(2, 8, 8, 0.05, 0.95);
        let zero = es_loss(
            &s,
            &t,
            &ESConfig {
                alpha: 0.0,
                beta: 0.0,
                delta: 0.5,
            },
        )
        .unwrap();
        assert_eq!(zero.es, 0.0);
        assert!(zero.grad.data.iter().all(|&g| g == 0.0));
        let ea_only = es_loss(
            &s,
            &t,
            &ESConfig {
                alpha: 1.0,
                beta: 0.0,
                delta: 0.5,
            },
        )
        .unwrap();
        let ea = edge_alignment_loss(&s, &t).unwrap();
        assert_eq!(ea_only.es, ea.value);
        assert_eq!(ea_only.grad, ea.grad);
    }

    #[test]
    fn es_rejects_negative_weights() {
        let s = Plane::filled(4, 4, 0.5f64);
        assert!(es_loss(
            &s,
            &s,
            &ESConfig {
                alpha: -1.0,
                beta: 0.3,
                delta: 0.5
            }
        )
        .is_err());
    }

    #[test]
    fn bce_gradient_is_p_minus_t_over_n() {
        let z = rng_plane(4, 8, 8, -3.0, 3.0);
        let t = rng_plane(6, 8, 8, 0.0, 1.0);
        let p = z.map(sigmoid);
        let r = bce_loss(&p, &t).unwrap();
        for i in 0..64 {
            assert!((r.grad.data[i] - (p.data[i] - t.data[i]) / 64.0).abs() < 1e-15);
        }
    }
}
