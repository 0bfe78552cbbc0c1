//! Weak and strong augmentation.
//!
//! Weak = horizontal flip + random crop + resize to the training size.
//! Strong = the same geometry plus color jitter, optional Gaussian blur and
//! cutout boxes. A paired (weak, strong) draw shares its geometry verbatim so
//! teacher and student outputs are pixelwise comparable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, SoftMask};
use crate::error::{Error, Result};
use crate::tensor::Plane;

/// Augmentation magnitudes (the `augment:` config section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Minimum crop area as a fraction of the image.
    pub min_crop_area: f64,
    /// Crop aspect-ratio range `(lo, hi)`, sampled log-uniformly.
    pub crop_aspect: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub cutout_count: (usize, usize),
    /// Maximum area of one cutout box as a fraction of the image.
    pub cutout_max_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            min_crop_area: 0.5,
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.5),
            cutout_count: (1, 3),
            cutout_max_area: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.flip_prob)
            && self.min_crop_area >= 0.5
            && self.min_crop_area <= 1.0
            && self.crop_aspect.0 > 0.0
            && self.crop_aspect.0 <= self.crop_aspect.1
            && [self.brightness, self.contrast, self.saturation]
                .iter()
                .all(|&v| (0.0..1.0).contains(&v))
            && unit(self.blur_prob)
            && self.blur_sigma.0 > 0.0
            && self.blur_sigma.0 <= self.blur_sigma.1
            && self.cutout_count.0 <= self.cutout_count.1
            && unit(self.cutout_max_area);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid augmentation config: {self:?}"
            )))
        }
    }
}

/// Axis-aligned rectangle in normalized `[0, 1]²` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRect {
    pub y0: f64,
    pub x0: f64,
    pub h: f64,
    pub w: f64,
}

impl NormRect {
    pub const FULL: NormRect = NormRect {
        y0: 0.0,
        x0: 0.0,
        h: 1.0,
        w: 1.0,
    };

    pub fn area(&self) -> f64 {
        self.h * self.w
    }

    pub fn within_unit_square(&self) -> bool {
        self.y0 >= 0.0
            && self.x0 >= 0.0
            && self.h > 0.0
            && self.w > 0.0
            && self.y0 + self.h <= 1.0 + 1e-12
            && self.x0 + self.w <= 1.0 + 1e-12
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub flip: bool,
    /// Invariant: inside the unit square, area ≥ 0.5.
    pub crop: NormRect,
}

impl Geometry {
    pub const IDENTITY: Geometry = Geometry {
        flip: false,
        crop: NormRect::FULL,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    /// Multiplicative brightness factor `1 + brightness`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: Option<f64>,
    pub cutouts: Vec<NormRect>,
}

impl Photometric {
    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0
            && self.contrast == 0.0
            && self.saturation == 0.0
            && self.blur_sigma.is_none()
            && self.cutouts.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugKind {
    Weak,
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub kind: AugKind,
    pub seed: u64,
    pub geometry: Geometry,
    /// Present only for strong specs.
    pub photometric: Option<Photometric>,
}

impl AugSpec {
    pub fn identity() -> Self {
        Self {
            kind: AugKind::Weak,
            seed: 0,
            geometry: Geometry::IDENTITY,
            photometric: None,
        }
    }
}

fn sample_geometry(rng: &mut impl Rng, cfg: &AugmentConfig) -> Geometry {
    let flip = rng.gen_bool(cfg.flip_prob);
    let (lo, hi) = (cfg.crop_aspect.0.ln(), cfg.crop_aspect.1.ln());
    let mut crop = NormRect::FULL;
    for _ in 0..10 {
        let area = rng.gen_range(cfg.min_crop_area..=1.0);
        let aspect = if hi > lo {
            rng.gen_range(lo..=hi).exp()
        } else {
            lo.exp()
        };
        let (w, h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
        if w <= 1.0 && h <= 1.0 {
            crop = NormRect {
                y0: rng.gen_range(0.0..=1.0 - h),
                x0: rng.gen_range(0.0..=1.0 - w),
                h,
                w,
            };
            break;
        }
    }
    Geometry { flip, crop }
}

fn sym(rng: &mut impl Rng, m: f64) -> f64 {
    if m > 0.0 {
        rng.gen_range(-m..=m)
    } else {
        0.0
    }
}

fn sample_photometric(rng: &mut impl Rng, cfg: &AugmentConfig) -> Photometric {
    let brightness = sym(rng, cfg.brightness);
    let contrast = sym(rng, cfg.contrast);
    let saturation = sym(rng, cfg.saturation);
    let blur_sigma = rng
        .gen_bool(cfg.blur_prob)
        .then(|| rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1));
    let n = rng.gen_range(cfg.cutout_count.0..=cfg.cutout_count.1);
    let cutouts = (0..n)
        .map(|_| {
            let area = rng.gen_range(0.0..=cfg.cutout_max_area);
            let aspect = rng.gen_range(0.5f64.ln()..=2.0f64.ln()).exp();
            let h = (area / aspect).sqrt().min(1.0);
            let w = (area / h.max(1e-12)).min(1.0);
            NormRect {
                y0: rng.gen_range(0.0..=1.0 - h),
                x0: rng.gen_range(0.0..=1.0 - w),
                h,
                w,
            }
        })
        .collect();
    Photometric {
        brightness,
        contrast,
        saturation,
        blur_sigma,
        cutouts,
    }
}

/// A weak spec alone (used for labeled samples).
pub fn sample_weak_spec(rng_seed: u64, cfg: &AugmentConfig) -> AugSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    AugSpec {
        kind: AugKind::Weak,
        seed: rng_seed,
        geometry: sample_geometry(&mut rng, cfg),
        photometric: None,
    }
}

/// Weak and strong specs with identical geometry.
pub fn sample_paired_specs(rng_seed: u64, cfg: &AugmentConfig) -> (AugSpec, AugSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let geometry = sample_geometry(&mut rng, cfg);
    let photometric = sample_photometric(&mut rng, cfg);
    (
        AugSpec {
            kind: AugKind::Weak,
            seed: rng_seed,
            geometry,
            photometric: None,
        },
        AugSpec {
            kind: AugKind::Strong,
            seed: rng_seed,
            geometry,
            photometric: Some(photometric),
        },
    )
}

/// Bilinear crop-resize-flip of one plane (half-pixel centers).
fn warp(src: &[f32], h: usize, w: usize, g: &Geometry, out: (usize, usize)) -> Vec<f32> {
    let (oh, ow) = out;
    let sy = g.crop.h * h as f64 / oh as f64;
    let sx = g.crop.w * w as f64 / ow as f64;
    let (by, bx) = (g.crop.y0 * h as f64, g.crop.x0 * w as f64);
    let taps = |pos: f64, n: usize| {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let mut dst = vec![0.0f32; oh * ow];
    for i in 0..oh {
        let (y0, y1, ty) = taps(by + (i as f64 + 0.5) * sy - 0.5, h);
        for j in 0..ow {
            let jj = if g.flip { ow - 1 - j } else { j };
            let (x0, x1, tx) = taps(bx + (jj as f64 + 0.5) * sx - 0.5, w);
            let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * tx;
            let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * tx;
            dst[i * ow + j] = if ty == 0.0 {
                top
            } else {
                top + (bot - top) * ty
            };
        }
    }
    dst
}

fn gaussian_blur(ch: &mut [f32], h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| {
                    k[(d + r) as usize]
                        * ch[y * w + (x as isize + d).clamp(0, w as isize - 1) as usize]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            ch[y * w + x] = (-r..=r)
                .map(|d| {
                    k[(d + r) as usize]
                        * tmp[(y as isize + d).clamp(0, h as isize - 1) as usize * w + x]
                })
                .sum();
        }
    }
}

fn photometric(px: &mut [f32], h: usize, w: usize, p: &Photometric, fill: [f32; 3]) {
    let n = h * w;
    let b = (1.0 + p.brightness) as f32;
    px.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    let c = (1.0 + p.contrast) as f32;
    let gray_mean = (0..n)
        .map(|i| 0.299 * px[i] + 0.587 * px[n + i] + 0.114 * px[2 * n + i])
        .sum::<f32>()
        / n as f32;
    px.iter_mut()
        .for_each(|v| *v = (gray_mean + (*v - gray_mean) * c).clamp(0.0, 1.0));
    let s = (1.0 + p.saturation) as f32;
    for i in 0..n {
        let gray = 0.299 * px[i] + 0.587 * px[n + i] + 0.114 * px[2 * n + i];
        for k in 0..3 {
            let v = &mut px[k * n + i];
            *v = (gray + (*v - gray) * s).clamp(0.0, 1.0);
        }
    }
    if let Some(sigma) = p.blur_sigma {
        for k in 0..3 {
            gaussian_blur(&mut px[k * n..(k + 1) * n], h, w, sigma);
        }
    }
    for r in &p.cutouts {
        let (y0, x0) = (
            (r.y0 * h as f64).floor() as usize,
            (r.x0 * w as f64).floor() as usize,
        );
        let (y1, x1) = (
            ((r.y0 + r.h) * h as f64).ceil() as usize,
            ((r.x0 + r.w) * w as f64).ceil() as usize,
        );
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                for k in 0..3 {
                    px[k * n + y * w + x] = fill[k];
                }
            }
        }
    }
}

/// Applies `spec` to an image and, geometrically only, to its mask.
/// `fill` is the cutout color (the dataset mean).
pub fn apply(
    spec: &AugSpec,
    image: &ImageTensor,
    mask: Option<&SoftMask>,
    size: (usize, usize),
    fill: [f32; 3],
) -> Result<(ImageTensor, Option<SoftMask>)> {
    if let Some(m) = mask {
        if m.shape() != image.shape() {
            return Err(Error::ShapeMismatch {
                id: "augment".into(),
                expected: image.shape(),
                actual: m.shape(),
            });
        }
    }
    let (h, w) = image.shape();
    let g = &spec.geometry;
    let mut px = Vec::with_capacity(3 * size.0 * size.1);
    for k in 0..3 {
        px.extend(warp(image.channel(k), h, w, g, size));
    }
    if let Some(p) = &spec.photometric {
        photometric(&mut px, size.0, size.1, p, fill);
    }
    let out = ImageTensor::from_clamped(size.0, size.1, px)?;
    let mask = mask
        .map(|m| {
            let v = warp(m.values(), h, w, g, size)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            SoftMask::new(Plane::from_vec(size.0, size.1, v))
        })
        .transpose()?;
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize) -> ImageTensor {
        let px = (0..3 * h * w)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        ImageTensor::new(h, w, px).unwrap()
    }

    fn test_mask(h: usize, w: usize) -> SoftMask {
        SoftMask::new(Plane::from_fn(h, w, |y, x| {
            if y > 5 && x > 3 && x < 12 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn paired_specs_share_geometry_and_are_deterministic() {
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let (w, s) = sample_paired_specs(seed, &cfg);
            assert_eq!(w.geometry, s.geometry);
            assert!(w.photometric.is_none() && s.photometric.is_some());
            assert!(w.geometry.crop.within_unit_square() && w.geometry.crop.area() >= 0.5 - 1e-12);
            assert_eq!(sample_paired_specs(seed, &cfg), (w, s));
        }
    }

    #[test]
    fn flip_frequency_near_half() {
        let cfg = AugmentConfig::default();
        let flips = (0..1000)
            .filter(|&s| sample_paired_specs(s, &cfg).0.geometry.flip)
            .count();
        assert!((450..=550).contains(&flips), "{flips}");
    }

    #[test]
    fn identity_spec_is_identity_at_same_size() {
        let img = test_image(16, 20);
        let m = test_mask(16, 20);
        let (out, om) = apply(&AugSpec::identity(), &img, Some(&m), (16, 20), [0.5; 3]).unwrap();
        assert_eq!(out, img);
        assert_eq!(om.unwrap(), m);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = test_image(16, 16);
        let spec = AugSpec {
            geometry: Geometry {
                flip: true,
                crop: NormRect::FULL,
            },
            ..AugSpec::identity()
        };
        let (once, _) = apply(&spec, &img, None, (16, 16), [0.5; 3]).unwrap();
        assert_ne!(once, img);
        let (twice, _) = apply(&spec, &once, None, (16, 16), [0.5; 3]).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn strong_mask_equals_weak_mask() {
        let img = test_image(24, 24);
        let m = test_mask(24, 24);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let (w, s) = sample_paired_specs(seed, &cfg);
            let (wi, wm) = apply(&w, &img, Some(&m), (16, 16), [0.5; 3]).unwrap();
            let (si, sm) = apply(&s, &img, Some(&m), (16, 16), [0.5; 3]).unwrap();
            assert_eq!(wm, sm);
            assert_eq!(wi.shape(), si.shape());
            assert!(si.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_regions_stay_zero() {
        let m = SoftMask::new(Plane::from_fn(
            16,
            16,
            |_, x| if x >= 8 { 1.0 } else { 0.0 },
        ))
        .unwrap();
        let img = test_image(16, 16);
        let spec = AugSpec {
            geometry: Geometry {
                flip: false,
                crop: NormRect {
                    y0: 0.1,
                    x0: 0.0,
                    h: 0.8,
                    w: 0.8,
                },
            },
            ..AugSpec::identity()
        };
        let (_, om) = apply(&spec, &img, Some(&m), (16, 16), [0.5; 3]).unwrap();
        let om = om.unwrap();
        // source columns < 7 map to output columns < 8
        for y in 0..16 {
            for x in 0..8 {
                assert_eq!(om.plane().get(y, x), 0.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig {
            min_crop_area: 0.3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
