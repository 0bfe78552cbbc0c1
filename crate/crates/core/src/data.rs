//! Images, masks, samples and datasets, plus PNG ingestion.
//!
//! On disk a dataset is `<root>/images/*.png` with an optional parallel
//! `<root>/masks/*.png`; files pair by stem and a grayscale byte `b` decodes
//! to `b / 255`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Plane;

pub const MIN_IMAGE_SIDE: usize = 16;

/// Three-channel image, channel-major (`CHW`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::OutOfRange {
                id: "image".into(),
                detail: format!("{height}x{width} is below the {MIN_IMAGE_SIDE}px minimum"),
            });
        }
        if pixels.len() != Self::CHANNELS * height * width {
            return Err(Error::OutOfRange {
                id: "image".into(),
                detail: format!("buffer length {} for {height}x{width}x3", pixels.len()),
            });
        }
        if let Some(v) = pixels
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::OutOfRange {
                id: "image".into(),
                detail: format!("pixel value {v} outside [0, 1]"),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (non-finite → 0).
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f32>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let n = (self.height * self.width) as f64;
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (self.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Probability map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(Plane<f32>);

impl SoftMask {
    pub fn new(plane: Plane<f32>) -> Result<Self> {
        if let Some(v) = plane
            .data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::InvalidMask(format!("value {v} outside [0, 1]")));
        }
        Ok(Self(plane))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidMask(format!(
                "buffer length {} for {height}x{width}",
                data.len()
            )));
        }
        Self::new(Plane::from_vec(height, width, data))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Plane::filled(height, width, value))
    }

    pub fn plane(&self) -> &Plane<f32> {
        &self.0
    }

    pub fn into_plane(self) -> Plane<f32> {
        self.0
    }

    pub fn values(&self) -> &[f32] {
        &self.0.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn to_f64(&self) -> Plane<f64> {
        self.0.map(|v| v as f64)
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Luma([(self.0.get(y as usize, x as usize) * 255.0).round() as u8])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTag {
    Source,
    Target,
    ConfidentPseudo,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
            DomainTag::ConfidentPseudo => "confident-pseudo",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Arc<ImageTensor>,
    pub label: Option<SoftMask>,
    pub tag: DomainTag,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: ImageTensor,
        label: Option<SoftMask>,
        tag: DomainTag,
    ) -> Result<Self> {
        let id = id.into();
        match (tag, &label) {
            (DomainTag::Source | DomainTag::ConfidentPseudo, None) => {
                return Err(Error::DomainTag(format!(
                    "{tag} sample `{id}` has no label"
                )))
            }
            (DomainTag::Target, Some(_)) => {
                return Err(Error::DomainTag(format!(
                    "target sample `{id}` carries a label"
                )))
            }
            _ => {}
        }
        if let Some(mask) = &label {
            if mask.shape() != image.shape() {
                return Err(Error::ShapeMismatch {
                    id,
                    expected: image.shape(),
                    actual: mask.shape(),
                });
            }
        }
        Ok(Self {
            id,
            image: Arc::new(image),
            label,
            tag,
        })
    }

    /// A copy of this sample without its label, tagged as target.
    pub fn unlabeled(&self) -> Self {
        Self {
            id: self.id.clone(),
            image: Arc::clone(&self.image),
            label: None,
            tag: DomainTag::Target,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    samples: Vec<Sample>,
}

fn tags_compatible(tags: &HashSet<DomainTag>) -> bool {
    tags.len() <= 1
        || (tags.len() == 2
            && tags.contains(&DomainTag::Source)
            && tags.contains(&DomainTag::ConfidentPseudo))
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        let dupes: BTreeSet<String> = samples
            .iter()
            .filter(|s| !seen.insert(s.id.as_str()))
            .map(|s| s.id.clone())
            .collect();
        if !dupes.is_empty() {
            return Err(Error::DuplicateIds(dupes.into_iter().collect()));
        }
        let tags: HashSet<DomainTag> = samples.iter().map(|s| s.tag).collect();
        if !tags_compatible(&tags) {
            return Err(Error::DomainTag(format!("cannot mix tags {tags:?}")));
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            samples: Vec::new(),
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn mean_color(&self) -> [f32; 3] {
        if self.samples.is_empty() {
            return [0.5; 3];
        }
        let mut acc = [0.0f64; 3];
        for s in &self.samples {
            let c = s.image.mean_color();
            for k in 0..3 {
                acc[k] += c[k] as f64;
            }
        }
        let n = self.samples.len() as f64;
        acc.map(|v| (v / n) as f32)
    }

    /// Same samples with labels stripped; used to hold out a labeled split.
    pub fn without_labels(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            samples: self.samples.iter().map(Sample::unlabeled).collect(),
        }
    }
}

/// Disjoint union `a ∪ b`, preserving order (`a` first).
pub fn merge_datasets(a: &DomainDataset, b: &DomainDataset) -> Result<DomainDataset> {
    let ids: HashSet<&str> = a.ids().collect();
    let colliding: Vec<String> = b
        .ids()
        .filter(|id| ids.contains(id))
        .map(str::to_owned)
        .collect();
    if !colliding.is_empty() {
        return Err(Error::DuplicateIds(colliding));
    }
    let samples = a.samples.iter().chain(&b.samples).cloned().collect();
    DomainDataset::new(a.name.clone(), samples)
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_owned(), path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(h, w, pixels).map_err(|e| match e {
        Error::OutOfRange { detail, .. } => Error::OutOfRange {
            id: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

pub fn read_mask(path: &Path) -> Result<SoftMask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    let (values, w, h) = match img {
        image::DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (
                g.into_raw()
                    .into_iter()
                    .map(|b| b as f32 / 65535.0)
                    .collect(),
                w,
                h,
            )
        }
        other => {
            let g = other.to_luma8();
            let (w, h) = (g.width() as usize, g.height() as usize);
            (
                g.into_raw()
                    .into_iter()
                    .map(|b| b as f32 / 255.0)
                    .collect::<Vec<_>>(),
                w,
                h,
            )
        }
    };
    SoftMask::from_vec(h, w, values)
        .map_err(|e| Error::InvalidMask(format!("{}: {e}", path.display())))
}

/// Loads `<root>/images` (and `<root>/masks` when `expect_labels`), sorted by
/// file stem.
pub fn load_dataset(root: &Path, expect_labels: bool) -> Result<DomainDataset> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::MissingDirectory(images_dir));
    }
    let masks_dir = root.join("masks");
    if expect_labels && !masks_dir.is_dir() {
        return Err(Error::MissingDirectory(masks_dir));
    }
    let stems = png_stems(&images_dir)?;
    if expect_labels {
        let mask_stems: HashSet<String> =
            png_stems(&masks_dir)?.into_iter().map(|(s, _)| s).collect();
        let missing: Vec<String> = stems
            .iter()
            .filter(|(s, _)| !mask_stems.contains(s))
            .map(|(s, _)| s.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Unpaired(missing));
        }
    }
    let tag = if expect_labels {
        DomainTag::Source
    } else {
        DomainTag::Target
    };
    let samples = stems
        .par_iter()
        .map(|(stem, path)| {
            let image = read_image(path)?;
            let label = if expect_labels {
                let mask = read_mask(&masks_dir.join(format!("{stem}.png")))?;
                if mask.shape() != image.shape() {
                    return Err(Error::ShapeMismatch {
                        id: stem.clone(),
                        expected: image.shape(),
                        actual: mask.shape(),
                    });
                }
                Some(mask)
            } else {
                None
            };
            Sample::new(stem.clone(), image, label, tag)
        })
        .collect::<Result<Vec<_>>>()?;
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_owned();
    DomainDataset::new(name, samples)
}

/// Writes an 8-bit grayscale PNG; value `v` is stored as `round(v · 255)`.
pub fn save_mask(mask: &SoftMask, path: &Path) -> Result<()> {
    mask.to_gray8().save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    image.to_rgb8().save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// File stem used when a sample is written to disk (`/` is not portable).
pub fn file_stem_for(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}

/// Writes `dataset` in the directory layout understood by [`load_dataset`].
pub fn write_dataset(dataset: &DomainDataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let masks = root.join("masks");
    if dataset.samples.iter().any(|s| s.label.is_some()) {
        std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    dataset.samples.par_iter().try_for_each(|s| {
        let stem = file_stem_for(&s.id);
        save_image(&s.image, &images.join(format!("{stem}.png")))?;
        if let Some(label) = &s.label {
            save_mask(label, &masks.join(format!("{stem}.png")))?;
        }
        Ok(())
    })
}
