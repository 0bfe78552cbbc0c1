//! The camouflaged-object evaluation suite: S-measure, weighted F-measure,
//! E-measure and F-measure (adaptive / mean / max) and MAE.
//!
//! All metrics run in `f64`. Ground truth passed to the metric functions must
//! be exactly binary; [`binarize`] converts stored masks.

mod structure;
mod threshold;
mod weighted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use structure::s_measure;
pub use threshold::{
    adaptive_threshold, e_measure, f_measure, ThresholdScores, BETA2, N_THRESHOLDS,
};
pub use weighted::{
    gaussian_kernel, nearest_foreground, weighted_f_measure, weighted_f_measure_with,
    BackgroundWeighting,
};

use crate::data::{read_mask, SoftMask};
use crate::error::{Error, Result};
use crate::tensor::Plane;

fn check_shape(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            id: "metric".into(),
            expected: gt.shape(),
            actual: pred.shape(),
        });
    }
    Ok(())
}

pub(crate) fn check_pair(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<()> {
    check_shape(pred, gt)?;
    if let Some(v) = gt.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidMask(format!(
            "ground truth must be binary, found {v}"
        )));
    }
    if let Some(v) = pred.data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidMask(format!(
            "prediction outside [0, 1]: {v}"
        )));
    }
    Ok(())
}

pub(crate) fn count_fg(gt: &Plane<f64>) -> usize {
    gt.data.iter().filter(|&&v| v > 0.5).count()
}

/// `v ≥ 0.5 → 1`, else 0.
pub fn binarize(mask: &SoftMask) -> Plane<f64> {
    mask.to_f64().map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

pub fn mae(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<f64> {
    check_shape(pred, gt)?;
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// The nine reported metrics for one image or, averaged, for a set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub s_alpha: f64,
    pub f_beta_w: f64,
    pub e_ad: f64,
    pub e_mn: f64,
    pub e_mx: f64,
    pub f_ad: f64,
    pub f_mn: f64,
    pub f_mx: f64,
    pub mae: f64,
}

impl ImageMetrics {
    /// Column order of the result tables.
    pub const COLUMNS: [&'static str; 9] = [
        "S_alpha", "F_beta_w", "E_ad", "E_mn", "E_mx", "F_ad", "F_mn", "F_mx", "MAE",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.s_alpha,
            self.f_beta_w,
            self.e_ad,
            self.e_mn,
            self.e_mx,
            self.f_ad,
            self.f_mn,
            self.f_mx,
            self.mae,
        ]
    }
}

/// Set-level means of per-image metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub metrics: ImageMetrics,
    pub n_images: usize,
}

impl std::ops::Deref for MetricsReport {
    type Target = ImageMetrics;

    fn deref(&self) -> &ImageMetrics {
        &self.metrics
    }
}

impl MetricsReport {
    /// Ordered mean; an empty slice gives an all-zero report.
    pub fn mean_of(per_image: &[ImageMetrics]) -> Self {
        let n = per_image.len();
        let mut sums = [0.0; 9];
        for m in per_image {
            for (s, v) in sums.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        let d = n.max(1) as f64;
        let [s_alpha, f_beta_w, e_ad, e_mn, e_mx, f_ad, f_mn, f_mx, mae] = sums.map(|s| s / d);
        Self {
            metrics: ImageMetrics {
                s_alpha,
                f_beta_w,
                e_ad,
                e_mn,
                e_mx,
                f_ad,
                f_mn,
                f_mx,
                mae,
            },
            n_images: n,
        }
    }

    pub fn table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = ImageMetrics::COLUMNS;
        writeln!(f, "{}", cols.map(|c| format!("{c:>9}")).join(" "))?;
        writeln!(
            f,
            "{}",
            self.values().map(|v| format!("{v:>9.4}")).join(" ")
        )?;
        write!(f, "({} images)", self.n_images)
    }
}

/// All metrics for one image. `gt` must be binary. An empty ground truth
/// scores 0 on the weighted F-measure, which is undefined there.
pub fn evaluate_image(pred: &Plane<f64>, gt: &Plane<f64>) -> Result<ImageMetrics> {
    check_pair(pred, gt)?;
    let f = f_measure(pred, gt)?;
    let e = e_measure(pred, gt)?;
    let f_beta_w = if count_fg(gt) == 0 {
        0.0
    } else {
        weighted_f_measure(pred, gt)?
    };
    Ok(ImageMetrics {
        s_alpha: s_measure(pred, gt)?,
        f_beta_w,
        e_ad: e.adaptive,
        e_mn: e.mean,
        e_mx: e.max,
        f_ad: f.adaptive,
        f_mn: f.mean,
        f_mx: f.max,
        mae: mae(pred, gt)?,
    })
}

/// Evaluates `(prediction, stored gt)` pairs; gt is binarized at 0.5.
pub fn evaluate_masks(pairs: &[(&SoftMask, &SoftMask)]) -> Result<MetricsReport> {
    let per_image = pairs
        .par_iter()
        .map(|(p, g)| evaluate_image(&p.to_f64(), &binarize(g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::mean_of(&per_image))
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Per-image metrics for predictions and ground truths paired by file stem,
/// in stem order.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, ImageMetrics)>> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let unpaired: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !unpaired.is_empty() {
        return Err(Error::Unpaired(unpaired));
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> =
        preds.iter().map(|(k, p)| (k, p, &gts[k])).collect();
    pairs
        .par_iter()
        .map(|(stem, p, g)| {
            let pred = read_mask(p)?;
            let gt = read_mask(g)?;
            if pred.shape() != gt.shape() {
                return Err(Error::ShapeMismatch {
                    id: (*stem).clone(),
                    expected: gt.shape(),
                    actual: pred.shape(),
                });
            }
            Ok((
                (*stem).clone(),
                evaluate_image(&pred.to_f64(), &binarize(&gt))?,
            ))
        })
        .collect()
}

pub fn evaluate_set(pred_dir: &Path, gt_dir: &Path) -> Result<MetricsReport> {
    let per_image: Vec<ImageMetrics> = evaluate_dirs(pred_dir, gt_dir)?
        .into_iter()
        .map(|(_, m)| m)
        .collect();
    Ok(MetricsReport::mean_of(&per_image))
}

/// JSON document `{metric: value, ..., n_images, pred_dir, gt_dir, timestamp}`;
/// the timestamp is Unix seconds.
pub fn report_json(report: &MetricsReport, pred_dir: &Path, gt_dir: &Path) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    let obj = v.as_object_mut().expect("report is an object");
    obj.insert("pred_dir".into(), pred_dir.display().to_string().into());
    obj.insert("gt_dir".into(), gt_dir.display().to_string().into());
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    obj.insert("timestamp".into(), ts.into());
    v
}
