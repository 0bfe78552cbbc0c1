//! Intra-domain transfer: confident label selection (CLS) over teacher
//! pseudo labels and construction of the evolving labeled domain.
//!
//! Selection keeps target samples whose ES score is at most `μ · mean(score)`,
//! zeroes every teacher probability below `τ`, and drops samples whose
//! surviving pixels are empty or average below `τ`. Labels stay soft.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, ModelState, SegModel};
use crate::data::{merge_datasets, DomainDataset, DomainTag, Sample, SoftMask};
use crate::error::{Error, Result};
use crate::losses::{es_loss, ESConfig};
use crate::tensor::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CLSConfig {
    /// Selection-ratio multiplier μ > 0.
    pub mu: f64,
    /// Confidence threshold τ in `[0, 1]`.
    pub tau: f64,
}

impl Default for CLSConfig {
    fn default() -> Self {
        Self::s2c()
    }
}

impl CLSConfig {
    pub fn s2c() -> Self {
        Self { mu: 0.8, tau: 0.4 }
    }

    pub fn c2c() -> Self {
        Self { mu: 1.0, tau: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "CLS needs mu > 0 and tau in [0, 1]: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Audit record of one selection event.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub cycle: usize,
    pub per_sample_loss: BTreeMap<String, f64>,
    pub mean_loss: f64,
    /// `mu · mean_loss`.
    pub threshold: f64,
    /// Ids passing the loss filter, in dataset order.
    pub loss_selected_ids: Vec<String>,
    /// Ids passing both filters, in dataset order.
    pub selected_ids: Vec<String>,
    /// Loss-selected ids removed by the τ sample filter.
    pub dropped_low_confidence_ids: Vec<String>,
    /// Mean surviving probability of each loss-selected sample (0 if none
    /// survive).
    pub confidence: BTreeMap<String, f64>,
}

/// Per-sample ES loss between student and teacher on un-augmented images.
/// Neither model is modified.
pub fn score_target_set<M: SegModel>(
    model: &M,
    student: &ModelState<f32>,
    teacher: &ModelState<f32>,
    target: &DomainDataset,
    es: &ESConfig,
) -> Result<BTreeMap<String, f64>> {
    student.ensure_compatible(teacher)?;
    target
        .samples()
        .par_iter()
        .map(|s| {
            let ps = forward(model, student, &s.image)?
                .probabilities
                .cast::<f64>();
            let pt = forward(model, teacher, &s.image)?
                .probabilities
                .cast::<f64>();
            Ok((s.id.clone(), es_loss(&ps, &pt, es)?.es))
        })
        .collect()
}

/// Pixels below `tau` set to exactly 0; others unchanged.
pub fn filter_pseudo_label(probabilities: &Plane<f32>, tau: f64) -> Plane<f32> {
    probabilities.map(|p| if (p as f64) < tau { 0.0 } else { p })
}

/// Mean over pixels that survive the τ cut with non-zero probability, or
/// `None` when there are none.
pub fn surviving_confidence(filtered: &Plane<f32>, tau: f64) -> Option<f64> {
    let survivors: Vec<f64> = filtered
        .data
        .iter()
        .map(|&p| p as f64)
        .filter(|&p| p > 0.0 && p >= tau)
        .collect();
    (!survivors.is_empty()).then(|| survivors.iter().sum::<f64>() / survivors.len() as f64)
}

/// Small-loss rule: `(mean, threshold = mu · mean, keep)` with `keep[i]`
/// iff `values[i] ≤ threshold`. An empty input keeps nothing.
pub fn small_loss_selection(values: &[f64], mu: f64) -> (f64, f64, Vec<bool>) {
    if values.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let threshold = mu * mean;
    (
        mean,
        threshold,
        values.iter().map(|&v| v <= threshold).collect(),
    )
}

/// Selection given precomputed scores and teacher probability maps.
/// `teacher_probs` needs entries for every loss-selected id.
pub fn select_from_predictions(
    scores: &BTreeMap<String, f64>,
    teacher_probs: &BTreeMap<String, Plane<f32>>,
    target: &DomainDataset,
    cfg: &CLSConfig,
    cycle: usize,
) -> Result<(DomainDataset, SelectionReport)> {
    cfg.validate()?;
    let missing: Vec<String> = target
        .ids()
        .filter(|id| !scores.contains_key(*id))
        .map(str::to_owned)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "scores missing for target samples {missing:?}"
        )));
    }
    let mut report = SelectionReport {
        cycle,
        per_sample_loss: scores.clone(),
        ..SelectionReport::default()
    };
    if target.is_empty() {
        return Ok((DomainDataset::empty(format!("d_cl{cycle}")), report));
    }
    let values: Vec<f64> = target.ids().map(|id| scores[id]).collect();
    let (mean, threshold, keep) = small_loss_selection(&values, cfg.mu);
    report.mean_loss = mean;
    report.threshold = threshold;

    let mut selected = Vec::new();
    for (sample, keep) in target.samples().iter().zip(keep) {
        if !keep {
            continue;
        }
        report.loss_selected_ids.push(sample.id.clone());
        let probs = teacher_probs
            .get(&sample.id)
            .ok_or_else(|| Error::Config(format!("no teacher prediction for `{}`", sample.id)))?;
        let filtered = filter_pseudo_label(probs, cfg.tau);
        let conf = surviving_confidence(&filtered, cfg.tau);
        report
            .confidence
            .insert(sample.id.clone(), conf.unwrap_or(0.0));
        match conf {
            Some(c) if c >= cfg.tau => {
                report.selected_ids.push(sample.id.clone());
                selected.push(Sample::new(
                    format!("cl{cycle}/{}", sample.id),
                    (*sample.image).clone(),
                    Some(SoftMask::new(filtered)?),
                    DomainTag::ConfidentPseudo,
                )?);
            }
            _ => report.dropped_low_confidence_ids.push(sample.id.clone()),
        }
    }
    if selected.is_empty() {
        log::warn!("cycle {cycle}: confident label selection kept no samples");
    }
    Ok((
        DomainDataset::new(format!("d_cl{cycle}"), selected)?,
        report,
    ))
}

/// Confident label selection with the teacher evaluated on un-augmented
/// images.
pub fn select_confident<M: SegModel>(
    model: &M,
    scores: &BTreeMap<String, f64>,
    teacher: &ModelState<f32>,
    target: &DomainDataset,
    cfg: &CLSConfig,
    cycle: usize,
) -> Result<(DomainDataset, SelectionReport)> {
    cfg.validate()?;
    let values: Vec<f64> = target
        .ids()
        .filter_map(|id| scores.get(id).copied())
        .collect();
    let (_, threshold, _) = small_loss_selection(&values, cfg.mu);
    let probs = target
        .samples()
        .par_iter()
        .filter(|s| scores.get(&s.id).is_some_and(|&v| v <= threshold))
        .map(|s| {
            Ok((
                s.id.clone(),
                forward(model, teacher, &s.image)?.probabilities,
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    select_from_predictions(scores, &probs, target, cfg, cycle)
}

/// `D̂_s = D_s ∪ D_cl`. Callers always pass the original source set, so a
/// newer selection fully replaces older pseudo labels.
pub fn build_evolving_domain(
    source: &DomainDataset,
    d_cl: &DomainDataset,
) -> Result<DomainDataset> {
    let mut merged = merge_datasets(source, d_cl)?;
    merged.name = "evolving".into();
    Ok(merged)
}
