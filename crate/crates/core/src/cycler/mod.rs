//! The full adaptation loop: Stage A, then for every further cycle Stage B
//! selection with the frozen models followed by Stage A on the evolving
//! domain. Also the source-only and mean-teacher baselines and the parameter
//! sweep.
//!
//! Only the teacher is evaluated. The test split is loaded only for
//! evaluation, which the data source enforces.

mod config;
mod source;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{deep_merge, sweep_key, ExperimentConfig, Paths, Profile, WarmStart};
pub use source::{AuditEntry, DataSource, DirSource, MemorySource, Phase, Split};

use crate::backbone::{forward, Checkpoint, ModelState, SegModel, UNet};
use crate::data::{file_stem_for, save_mask, write_dataset, DomainDataset, SoftMask};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_masks, report_json, MetricsReport};
use crate::stage_a::{log_to_csv, run_stage_a, Consistency, LogRow, StageAContext, TrainState};
use crate::stage_b::{build_evolving_domain, score_target_set, select_confident, SelectionReport};

/// Seed derivation from the master seed.
pub mod seeds {
    use crate::tensor::derive_seed;

    const MODEL: u64 = 0x4D_4F44_454C;
    const STAGE_A: u64 = 0x5354_4147_4541;

    /// Initial weights of cycle 1, shared by every run mode.
    pub fn model_init(master: u64) -> u64 {
        derive_seed(&[master, MODEL, 0])
    }

    /// Re-initialization for the `fresh` warm start.
    pub fn model_fresh(master: u64, cycle: usize) -> u64 {
        derive_seed(&[master, MODEL, cycle as u64])
    }

    pub fn stage_a(master: u64, cycle: usize) -> u64 {
        derive_seed(&[master, STAGE_A, cycle as u64])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Supervised CE on the source set only.
    SourceOnly,
    /// One Stage A with unweighted BCE consistency, no selection.
    MeanTeacher,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Self::SourceOnly),
            "mean_teacher" => Ok(Self::MeanTeacher),
            other => Err(Error::Config(format!("unknown baseline mode `{other}`"))),
        }
    }
}

/// What happened in one cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// 1-based.
    pub cycle: usize,
    /// `|D̂_s|` used by this cycle's Stage A.
    pub labeled_size: usize,
    /// Selection that built this cycle's labeled set (cycles ≥ 2).
    pub selection: Option<SelectionReport>,
    /// Teacher metrics after this cycle, when evaluated.
    pub metrics: Option<MetricsReport>,
    #[serde(skip)]
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_state: TrainState,
    pub cycles: Vec<CycleRecord>,
    /// Teacher metrics on the test split after the last cycle.
    pub final_metrics: MetricsReport,
    pub audit: Vec<AuditEntry>,
}

impl RunOutcome {
    pub fn selection_reports(&self) -> Vec<&SelectionReport> {
        self.cycles
            .iter()
            .filter_map(|c| c.selection.as_ref())
            .collect()
    }
}

/// The model described by the config.
pub fn build_model(cfg: &ExperimentConfig) -> Result<UNet> {
    UNet::new(cfg.model.clone())
}

/// Teacher probability masks on every sample of a labeled set, and the
/// metrics against the stored labels.
pub fn evaluate_model<M: SegModel>(
    model: &M,
    state: &ModelState<f32>,
    test: &DomainDataset,
) -> Result<(MetricsReport, Vec<SoftMask>)> {
    use rayon::prelude::*;
    let preds = test
        .samples()
        .par_iter()
        .map(|s| Ok(forward(model, state, &s.image)?.mask()))
        .collect::<Result<Vec<SoftMask>>>()?;
    let pairs =
        test.samples()
            .iter()
            .zip(&preds)
            .map(|(s, p)| {
                let gt = s.label.as_ref().ok_or_else(|| {
                    Error::DomainTag(format!("test sample `{}` has no label", s.id))
                })?;
                Ok((p, gt))
            })
            .collect::<Result<Vec<_>>>()?;
    Ok((evaluate_masks(&pairs)?, preds))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &serde_json::to_vec_pretty(value)?)
}

fn save_state(path: &Path, state: &TrainState, extra: &[(&str, String)]) -> Result<()> {
    Checkpoint {
        iteration: state.iteration,
        student: state.student.clone(),
        teacher: state.teacher.clone(),
        moments: state.moments.clone(),
        extra: extra
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    }
    .save(path)
}

/// Loads the test split, evaluates the teacher and persists the report (and
/// predictions when asked).
fn evaluate_and_record<M: SegModel>(
    model: &M,
    teacher: &ModelState<f32>,
    data: &mut dyn DataSource,
    cfg: &ExperimentConfig,
    name: &str,
    save_predictions: bool,
) -> Result<MetricsReport> {
    let test = data.load(Split::TargetTest, Phase::Evaluate)?;
    let (report, preds) = evaluate_model(model, teacher, &test)?;
    let out = &cfg.paths.output_dir;
    let pred_dir = out.join("predictions");
    if save_predictions {
        std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
        for (s, p) in test.samples().iter().zip(&preds) {
            save_mask(p, &pred_dir.join(format!("{}.png", file_stem_for(&s.id))))?;
        }
    }
    let gt_dir = data
        .audit()
        .last()
        .map(|a| PathBuf::from(&a.location))
        .unwrap_or_default();
    write_json(
        &out.join(format!("{name}.json")),
        &report_json(&report, &pred_dir, &gt_dir),
    )?;
    log::info!(
        "{name}: S_alpha {:.4} MAE {:.4} over {} images",
        report.s_alpha,
        report.mae,
        report.n_images
    );
    Ok(report)
}

fn finish(
    out: &Path,
    state: &TrainState,
    data: &dyn DataSource,
    summary: &impl Serialize,
) -> Result<()> {
    save_state(&out.join("final.ckpt"), state, &[])?;
    write_json(&out.join("path_audit.json"), &data.audit())?;
    write_json(&out.join("summary.json"), summary)
}

/// Full cycling adaptation. Artifacts under `cfg.paths.output_dir`:
/// `config.yaml`, per-cycle `train_log_cycle{c}.csv`, epoch checkpoints,
/// `cycle{c}.ckpt`, `selection_cycle{k}.json` and `pseudo_labels_cycle{k}/`
/// for the selection made after cycle `k`, `metrics_cycle{c}.json`,
/// `predictions/`, `final.ckpt`, `path_audit.json` and `summary.json`.
///
/// On error, every checkpoint written so far stays on disk.
pub fn run_csrda_with<M: SegModel>(
    model: &M,
    cfg: &ExperimentConfig,
    data: &mut dyn DataSource,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.paths.output_dir.clone();
    write_file(&out.join("config.yaml"), cfg.to_yaml()?.as_bytes())?;
    let source = data.load(Split::Source, Phase::Train)?;
    let target = data.load(Split::TargetTrain, Phase::Train)?;

    let init = model.init_state(seeds::model_init(cfg.seed));
    let (mut student, mut teacher) = (init.clone(), init);
    let mut labeled = source.clone();
    let mut prev: Option<TrainState> = None;
    let mut cycles = Vec::with_capacity(cfg.cycles);
    let mut final_metrics = None;

    for cycle in 1..=cfg.cycles {
        let mut selection = None;
        if let Some(p) = &prev {
            let k = cycle - 1;
            let scores = score_target_set(model, &p.student, &p.teacher, &target, &cfg.loss)?;
            let (d_cl, report) =
                select_confident(model, &scores, &p.teacher, &target, &cfg.cls, k)?;
            log::info!(
                "selection after cycle {k}: kept {} of {} target samples",
                d_cl.len(),
                target.len()
            );
            write_json(&out.join(format!("selection_cycle{k}.json")), &report)?;
            write_dataset(&d_cl, &out.join(format!("pseudo_labels_cycle{k}")))?;
            // always rebuilt from the original source set
            labeled = build_evolving_domain(&source, &d_cl)?;
            (student, teacher) = match cfg.warm_start {
                WarmStart::Teacher => (p.teacher.clone(), p.teacher.clone()),
                WarmStart::Student => (p.student.clone(), p.student.clone()),
                WarmStart::Fresh => {
                    let s = model.init_state(seeds::model_fresh(cfg.seed, cycle));
                    (s.clone(), s)
                }
            };
            selection = Some(report);
        }
        let ctx = StageAContext {
            cycle,
            checkpoint_dir: Some(out.join("checkpoints")),
        };
        let (state, log) = run_stage_a(
            model,
            student.clone(),
            teacher.clone(),
            &labeled,
            &target,
            &cfg.stage_config(cycle),
            &ctx,
        )?;
        write_file(
            &out.join(format!("train_log_cycle{cycle}.csv")),
            log_to_csv(&log).as_bytes(),
        )?;
        save_state(
            &out.join(format!("cycle{cycle}.ckpt")),
            &state,
            &[("cycle", cycle.to_string())],
        )?;

        let last = cycle == cfg.cycles;
        let metrics = if last || cfg.eval_every_cycle {
            let m = evaluate_and_record(
                model,
                &state.teacher,
                data,
                cfg,
                &format!("metrics_cycle{cycle}"),
                last && cfg.save_predictions,
            )?;
            if last {
                final_metrics = Some(m);
            }
            Some(m)
        } else {
            None
        };
        cycles.push(CycleRecord {
            cycle,
            labeled_size: labeled.len(),
            selection,
            metrics,
            log,
        });
        prev = Some(state);
    }

    let final_state = prev.expect("cycles ≥ 1");
    let final_metrics = final_metrics.expect("last cycle is evaluated");
    finish(&out, &final_state, data, &cycles)?;
    Ok(RunOutcome {
        final_state,
        cycles,
        final_metrics,
        audit: data.audit().to_vec(),
    })
}

/// [`run_csrda_with`] on the configured directories.
pub fn run_csrda(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_csrda_with(
        &build_model(cfg)?,
        cfg,
        &mut DirSource::new(cfg.paths.clone()),
    )
}

/// A single Stage A with the cycle-1 schedule and initialization of
/// [`run_csrda_with`]. `SourceOnly` never loads the target-train split.
/// Artifacts: `config.yaml`, `train_log_cycle1.csv`, checkpoints,
/// `metrics_cycle1.json`, `predictions/`, `final.ckpt`, `path_audit.json`.
pub fn run_baseline_with<M: SegModel>(
    model: &M,
    cfg: &ExperimentConfig,
    mode: BaselineMode,
    data: &mut dyn DataSource,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.paths.output_dir.clone();
    write_file(&out.join("config.yaml"), cfg.to_yaml()?.as_bytes())?;
    let source = data.load(Split::Source, Phase::Train)?;
    let mut stage = cfg.stage_config(1);
    let target = match mode {
        BaselineMode::SourceOnly => DomainDataset::empty("none"),
        BaselineMode::MeanTeacher => {
            stage.consistency = Consistency::Bce;
            data.load(Split::TargetTrain, Phase::Train)?
        }
    };
    let init = model.init_state(seeds::model_init(cfg.seed));
    let ctx = StageAContext {
        cycle: 1,
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let (state, log) = run_stage_a(model, init.clone(), init, &source, &target, &stage, &ctx)?;
    write_file(
        &out.join("train_log_cycle1.csv"),
        log_to_csv(&log).as_bytes(),
    )?;
    let metrics = evaluate_and_record(
        model,
        &state.teacher,
        data,
        cfg,
        "metrics_cycle1",
        cfg.save_predictions,
    )?;
    let cycles = vec![CycleRecord {
        cycle: 1,
        labeled_size: source.len(),
        selection: None,
        metrics: Some(metrics),
        log,
    }];
    finish(&out, &state, data, &cycles)?;
    Ok(RunOutcome {
        final_state: state,
        cycles,
        final_metrics: metrics,
        audit: data.audit().to_vec(),
    })
}

pub fn run_baseline(cfg: &ExperimentConfig, mode: BaselineMode) -> Result<RunOutcome> {
    run_baseline_with(
        &build_model(cfg)?,
        cfg,
        mode,
        &mut DirSource::new(cfg.paths.clone()),
    )
}

/// Parses `start:stop:step` (inclusive, with a small tolerance) or a comma
/// list.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("bad value list `{spec}`"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(bad());
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            // computed from the index so rounding does not accumulate
            Ok((0..=n)
                .map(|i| ((a + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: MetricsReport,
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    use crate::metrics::ImageMetrics;
    let mut s = format!("{param},{},n_images\n", ImageMetrics::COLUMNS.join(","));
    for r in rows {
        let vals: Vec<String> = r
            .metrics
            .values()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        s.push_str(&format!(
            "{},{},{}\n",
            r.value,
            vals.join(","),
            r.metrics.n_images
        ));
    }
    s
}

/// One full CSRDA run per value of `param`, each in
/// `output_dir/sweep_{param}_{value}`; writes `output_dir/sweep_{param}.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, param: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    let key = sweep_key(param);
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let yaml_value = if key.ends_with("epochs") || key == "cycles" {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Error::Config(format!(
                    "{key} needs a whole number, got {value}"
                )));
            }
            serde_yaml::Value::from(value as u64)
        } else {
            serde_yaml::Value::from(value)
        };
        let mut run_cfg = cfg.with_override(key, yaml_value)?;
        run_cfg.paths.output_dir = cfg.paths.output_dir.join(format!("sweep_{param}_{value}"));
        log::info!("sweep {key} = {value}");
        let outcome = run_csrda(&run_cfg)?;
        rows.push(SweepRow {
            value,
            metrics: outcome.final_metrics,
        });
    }
    write_file(
        &cfg.paths.output_dir.join(format!("sweep_{param}.csv")),
        sweep_csv(param, &rows).as_bytes(),
    )?;
    Ok(rows)
}
