//! Procedural toy camouflage data.
//!
//! Every image is a value-noise background from one texture family with a
//! hard-edged object pasted in. Source objects carry an unrelated texture
//! family (the "pasted-in" look of synthetic composites); target objects are
//! a fresh instance of the background family with a photometric jitter,
//! blended with the source rule in proportion `1 − gap`.
//!
//! The texture bank depends only on the family index, never on the seed, so
//! different seeds share one visual vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, DomainTag, ImageTensor, Sample, SoftMask};
use crate::error::{Error, Result};
use crate::tensor::Plane;

pub const MIN_SIZE: usize = 32;
pub const MIN_FG_FRACTION: f64 = 0.02;
pub const MAX_FG_FRACTION: f64 = 0.5;
/// Width of the boundary band used by [`texture_distance`].
pub const BAND_WIDTH: usize = 5;

const BANK_SALT: u64 = 0x7E47_0BA4_C0DE;
const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    /// `(height, width)`.
    pub size: (usize, usize),
    /// Domain-gap strength in `[0, 1]`.
    pub gap: f64,
    pub texture_bank: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 200,
            size: (64, 64),
            gap: 0.8,
            texture_bank: 12,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gap) {
            return Err(Error::Config(format!(
                "gap must lie in [0, 1], got {}",
                self.gap
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be ≥ 1".into()));
        }
        if self.size.0 < MIN_SIZE || self.size.1 < MIN_SIZE {
            return Err(Error::Config(format!(
                "size must be ≥ {MIN_SIZE} in both dimensions, got {:?}",
                self.size
            )));
        }
        if self.texture_bank < 2 {
            return Err(Error::Config(
                "texture_bank needs at least 2 families".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of one procedural texture family.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureFamily {
    /// Lattice cells across the image at the coarsest octave.
    pub cells: f64,
    pub octaves: usize,
    pub persistence: f64,
    /// Horizontal/vertical frequency ratio.
    pub anisotropy: f64,
    pub palette: [[f32; 3]; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

impl TextureFamily {
    pub fn from_index(k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(BANK_SALT ^ k as u64);
        let hue = rng.gen::<f64>();
        let spread = rng.gen_range(0.04..0.18);
        let palette = [
            hsv(
                hue - spread,
                rng.gen_range(0.3..0.8),
                rng.gen_range(0.15..0.4),
            ),
            hsv(hue, rng.gen_range(0.3..0.8), rng.gen_range(0.4..0.65)),
            hsv(
                hue + spread,
                rng.gen_range(0.2..0.7),
                rng.gen_range(0.65..0.95),
            ),
        ];
        Self {
            cells: rng.gen_range(2.0..7.0),
            octaves: rng.gen_range(2..=4),
            persistence: rng.gen_range(0.35..0.7),
            anisotropy: if rng.gen_bool(0.5) {
                1.0
            } else {
                rng.gen_range(0.4..2.5)
            },
            palette,
        }
    }

    /// One random instance rendered at `(h, w)`; channels-first.
    pub fn render(&self, h: usize, w: usize, rng: &mut impl Rng) -> [Plane<f32>; 3] {
        let n = value_noise(h, w, self, rng);
        let mut out = [(); 3].map(|_| Plane::filled(h, w, 0.0f32));
        for (i, &t) in n.data.iter().enumerate() {
            let c = colorize(&self.palette, t);
            for k in 0..3 {
                out[k].data[i] = c[k];
            }
        }
        out
    }
}

fn colorize(p: &[[f32; 3]; 3], t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * 2.0;
    let (a, b, u) = if t < 1.0 {
        (p[0], p[1], t)
    } else {
        (p[1], p[2], t - 1.0)
    };
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * u)
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave lattice value noise normalized to `[0, 1]`.
fn value_noise(h: usize, w: usize, fam: &TextureFamily, rng: &mut impl Rng) -> Plane<f32> {
    let mut acc = vec![0.0f64; h * w];
    let mut amp = 1.0;
    for o in 0..fam.octaves {
        let f = fam.cells * (1 << o) as f64;
        let (fx, fy) = (f * fam.anisotropy.sqrt(), f / fam.anisotropy.sqrt());
        let (gx, gy) = (fx.ceil() as usize + 2, fy.ceil() as usize + 2);
        let lattice: Vec<f64> = (0..gx * gy).map(|_| rng.gen::<f64>()).collect();
        let (ox, oy) = (rng.gen::<f64>(), rng.gen::<f64>());
        for y in 0..h {
            let v = y as f64 / h as f64 * fy + oy;
            let (y0, ty) = (v.floor() as usize, smooth(v.fract()));
            for x in 0..w {
                let u = x as f64 / w as f64 * fx + ox;
                let (x0, tx) = (u.floor() as usize, smooth(u.fract()));
                let l = |yy: usize, xx: usize| lattice[yy.min(gy - 1) * gx + xx.min(gx - 1)];
                let top = l(y0, x0) + (l(y0, x0 + 1) - l(y0, x0)) * tx;
                let bot = l(y0 + 1, x0) + (l(y0 + 1, x0 + 1) - l(y0 + 1, x0)) * tx;
                acc[y * w + x] += amp * (top + (bot - top) * ty);
            }
        }
        amp *= fam.persistence;
    }
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = (hi - lo).max(1e-12);
    Plane::from_vec(
        h,
        w,
        acc.into_iter().map(|v| ((v - lo) / span) as f32).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Ellipse,
    Blob,
    Polygon,
}

fn draw_shape(h: usize, w: usize, rng: &mut impl Rng) -> (Shape, Plane<f32>) {
    let shape = match rng.gen_range(0..3) {
        0 => Shape::Ellipse,
        1 => Shape::Blob,
        _ => Shape::Polygon,
    };
    let (hf, wf) = (h as f64, w as f64);
    let s = hf.min(wf);
    let cy = rng.gen_range(0.25..0.75) * hf;
    let cx = rng.gen_range(0.25..0.75) * wf;
    let mask = match shape {
        Shape::Ellipse => {
            let (a, b) = (rng.gen_range(0.08..0.4) * s, rng.gen_range(0.08..0.4) * s);
            let th = rng.gen_range(0.0..std::f64::consts::PI);
            let (c, sn) = (th.cos(), th.sin());
            Plane::from_fn(h, w, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let (u, v) = (dx * c + dy * sn, -dx * sn + dy * c);
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Shape::Blob => {
            let fam = TextureFamily {
                cells: 2.5,
                octaves: 2,
                persistence: 0.4,
                anisotropy: 1.0,
                palette: [[0.0; 3]; 3],
            };
            let noise = value_noise(h, w, &fam, rng);
            let r = rng.gen_range(0.18..0.42) * s;
            let thr = rng.gen_range(0.35..0.55);
            Plane::from_fn(h, w, |y, x| {
                let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt() / r;
                // radial falloff keeps the blob connected around (cy, cx)
                let field = noise.get(y, x) as f64 * 0.6 + (1.0 - d).max(0.0) * 0.8;
                if field > thr + 0.25 {
                    1.0
                } else {
                    0.0
                }
            })
        }
        Shape::Polygon => {
            let k = rng.gen_range(3..=8);
            let (a, b) = (rng.gen_range(0.1..0.4) * s, rng.gen_range(0.1..0.4) * s);
            let rot = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut angles: Vec<f64> = (0..k)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(|p, q| p.total_cmp(q));
            // vertices on an ellipse in angular order form a convex polygon
            let verts: Vec<(f64, f64)> = angles
                .iter()
                .map(|&t| {
                    let (u, v) = (a * t.cos(), b * t.sin());
                    (
                        cx + u * rot.cos() - v * rot.sin(),
                        cy + u * rot.sin() + v * rot.cos(),
                    )
                })
                .collect();
            Plane::from_fn(h, w, |y, x| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = (0..k).all(|i| {
                    let (x0, y0) = verts[i];
                    let (x1, y1) = verts[(i + 1) % k];
                    (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0.0
                });
                if inside {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    (shape, mask)
}

/// Shapes are redrawn until the foreground fraction is in range; a centered
/// ellipse is the fallback.
fn object_mask(h: usize, w: usize, rng: &mut impl Rng) -> Plane<f32> {
    for _ in 0..64 {
        let (_, m) = draw_shape(h, w, rng);
        let frac = m.data.iter().filter(|&&v| v > 0.5).count() as f64 / (h * w) as f64;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            return m;
        }
    }
    let (cy, cx, r) = (h as f64 / 2.0, w as f64 / 2.0, h.min(w) as f64 / 4.0);
    Plane::from_fn(h, w, |y, x| {
        if (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r {
            1.0
        } else {
            0.0
        }
    })
}

/// Brightness / contrast / per-channel tint applied to camouflage copies.
fn jitter(tex: &mut [Plane<f32>; 3], rng: &mut impl Rng) {
    let brightness = rng.gen_range(-0.08..0.08);
    let contrast = rng.gen_range(0.85..1.15);
    let tint: [f32; 3] = [(); 3].map(|_| rng.gen_range(-0.05..0.05));
    for (k, ch) in tex.iter_mut().enumerate() {
        let m = ch.mean();
        for v in ch.data.iter_mut() {
            *v = (m + (*v - m) * contrast + brightness + tint[k]).clamp(0.0, 1.0);
        }
    }
}

fn other_family(bank: usize, bg: usize, rng: &mut impl Rng) -> usize {
    (bg + rng.gen_range(1..bank)) % bank
}

fn composite(
    bg: &[Plane<f32>; 3],
    obj: &[Plane<f32>; 3],
    mask: &Plane<f32>,
) -> Result<ImageTensor> {
    let (h, w) = mask.shape();
    let mut px = Vec::with_capacity(3 * h * w);
    for k in 0..3 {
        px.extend(
            mask.data
                .iter()
                .zip(bg[k].data.iter().zip(&obj[k].data))
                .map(|(&m, (&b, &o))| if m > 0.5 { o } else { b }),
        );
    }
    ImageTensor::from_clamped(h, w, px)
}

fn rng_for(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

/// Image and exact object mask of one sample.
fn render_sample(
    cfg: &GenConfig,
    camouflage: bool,
    index: usize,
) -> Result<(ImageTensor, Plane<f32>)> {
    let stream = if camouflage {
        STREAM_TARGET
    } else {
        STREAM_SOURCE
    };
    render_with(cfg, camouflage, &mut rng_for(cfg.seed, stream, index))
}

fn render_with(
    cfg: &GenConfig,
    camouflage: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, Plane<f32>)> {
    let (h, w) = cfg.size;
    let bank = cfg.texture_bank;
    let bg_family = rng.gen_range(0..bank);
    let bg = TextureFamily::from_index(bg_family).render(h, w, rng);
    let mask = object_mask(h, w, rng);
    let pasted = TextureFamily::from_index(other_family(bank, bg_family, rng)).render(h, w, rng);
    let obj = if camouflage && cfg.gap > 0.0 {
        let mut copy = TextureFamily::from_index(bg_family).render(h, w, rng);
        jitter(&mut copy, rng);
        let g = cfg.gap as f32;
        [0, 1, 2].map(|k| {
            Plane::from_vec(
                h,
                w,
                pasted[k]
                    .data
                    .iter()
                    .zip(&copy[k].data)
                    .map(|(&p, &c)| (1.0 - g) * p + g * c)
                    .collect(),
            )
        })
    } else {
        pasted
    };
    Ok((composite(&bg, &obj, &mask)?, mask))
}

fn generate(
    cfg: &GenConfig,
    camouflage: bool,
    with_labels: bool,
    name: &str,
    prefix: &str,
) -> Result<DomainDataset> {
    cfg.validate()?;
    let samples = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let (image, mask) = render_sample(cfg, camouflage, i)?;
            let id = format!("{prefix}_s{}_{i:05}", cfg.seed);
            if with_labels {
                Sample::new(id, image, Some(SoftMask::new(mask)?), DomainTag::Source)
            } else {
                Sample::new(id, image, None, DomainTag::Target)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    DomainDataset::new(name, samples)
}

/// Labeled synthetic-looking composites.
pub fn generate_source(cfg: &GenConfig) -> Result<DomainDataset> {
    generate(cfg, false, true, "source", "src")
}

/// Camouflaged images. Unlabeled samples are tagged `target`; a labeled
/// (test) split carries ground truth and is therefore tagged `source`.
pub fn generate_target(cfg: &GenConfig, with_labels: bool) -> Result<DomainDataset> {
    let name = if with_labels {
        "target_test"
    } else {
        "target_train"
    };
    generate(cfg, true, with_labels, name, "tgt")
}

/// Mean absolute color difference between the object side and the
/// background side of a `BAND_WIDTH`-pixel band around the object boundary.
/// `None` when either side of the band is empty.
pub fn texture_distance(image: &ImageTensor, mask: &SoftMask) -> Option<f64> {
    let (h, w) = mask.shape();
    let fg = |y: usize, x: usize| mask.plane().get(y, x) > 0.5;
    let r = BAND_WIDTH as isize;
    let mut inner = [0.0f64; 3];
    let mut outer = [0.0f64; 3];
    let (mut ni, mut no) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let me = fg(y, x);
            let near_other = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    dy * dy + dx * dx <= r * r
                        && (0..h as isize).contains(&yy)
                        && (0..w as isize).contains(&xx)
                        && fg(yy as usize, xx as usize) != me
                })
            });
            if !near_other {
                continue;
            }
            let (acc, n) = if me {
                (&mut inner, &mut ni)
            } else {
                (&mut outer, &mut no)
            };
            for (k, a) in acc.iter_mut().enumerate() {
                *a += image.get(k, y, x) as f64;
            }
            *n += 1;
        }
    }
    if ni == 0 || no == 0 {
        return None;
    }
    Some(
        (0..3)
            .map(|k| (inner[k] / ni as f64 - outer[k] / no as f64).abs())
            .sum::<f64>()
            / 3.0,
    )
}

/// Mean [`texture_distance`] over the labeled samples of a dataset.
pub fn mean_texture_distance(dataset: &DomainDataset) -> f64 {
    let v: Vec<f64> = dataset
        .samples()
        .iter()
        .filter_map(|s| s.label.as_ref().and_then(|m| texture_distance(&s.image, m)))
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenDomain {
    Source,
    Target,
}

/// One named split of a [`GenPlan`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub domain: GenDomain,
    pub count: usize,
    /// Ignored for the source domain, which is always labeled.
    #[serde(default)]
    pub labeled: bool,
}

/// Several splits sharing size, gap and texture bank. Split `i` is generated
/// with seed `seed · 1000 + i`, so splits never share ids or RNG streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenPlan {
    pub seed: u64,
    pub size: (usize, usize),
    pub gap: f64,
    pub texture_bank: usize,
    pub splits: Vec<SplitSpec>,
}

impl Default for GenPlan {
    /// The toy experiment layout.
    fn default() -> Self {
        let split = |name: &str, domain, count, labeled| SplitSpec {
            name: name.into(),
            domain,
            count,
            labeled,
        };
        Self {
            seed: 0,
            size: (64, 64),
            gap: 0.8,
            texture_bank: 12,
            splits: vec![
                split("source", GenDomain::Source, 200, true),
                split("target_train", GenDomain::Target, 200, false),
                split("target_test", GenDomain::Target, 100, true),
                split("source_heldout", GenDomain::Source, 100, true),
            ],
        }
    }
}

impl GenPlan {
    pub fn split_config(&self, index: usize) -> GenConfig {
        GenConfig {
            seed: self.seed.wrapping_mul(1000).wrapping_add(index as u64),
            count: self.splits[index].count,
            size: self.size,
            gap: self.gap,
            texture_bank: self.texture_bank,
        }
    }

    /// Every split, named after its spec, in plan order.
    pub fn generate(&self) -> Result<Vec<DomainDataset>> {
        let mut names = std::collections::HashSet::new();
        if let Some(dup) = self.splits.iter().find(|s| !names.insert(s.name.as_str())) {
            return Err(Error::Config(format!(
                "duplicate split name `{}`",
                dup.name
            )));
        }
        if self.splits.len() > 1000 {
            return Err(Error::Config("at most 1000 splits".into()));
        }
        self.splits
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let cfg = self.split_config(i);
                let mut ds = match spec.domain {
                    GenDomain::Source => generate_source(&cfg)?,
                    GenDomain::Target => generate_target(&cfg, spec.labeled)?,
                };
                ds.name = spec.name.clone();
                Ok(ds)
            })
            .collect()
    }

    /// Writes `<root>/<split>/{images,masks}` and `<root>/gen_manifest.json`
    /// holding the plan and each split's [`GenConfig`].
    pub fn write(&self, root: &std::path::Path) -> Result<Vec<DomainDataset>> {
        let sets = self.generate()?;
        for ds in &sets {
            crate::data::write_dataset(ds, &root.join(&ds.name))?;
        }
        let manifest = serde_json::json!({
            "plan": self,
            "splits": (0..self.splits.len())
                .map(|i| serde_json::json!({
                    "name": self.splits[i].name,
                    "domain": self.splits[i].domain,
                    "labeled": self.splits[i].domain == GenDomain::Source || self.splits[i].labeled,
                    "config": self.split_config(i),
                }))
                .collect::<Vec<_>>(),
        });
        let path = root.join("gen_manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(sets)
    }
}
