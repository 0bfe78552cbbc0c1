//! Inter-domain transfer: supervised CE on labeled data plus teacher-student
//! consistency on the target domain, with an EMA teacher.
//!
//! Each step draws a labeled half-batch (weakly augmented) and a target
//! half-batch. The teacher sees the weak view of each target image, the
//! student the strong view with the same geometry. After one Adam step on the
//! student the teacher becomes `λ·teacher + (1−λ)·student`.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, sample_paired_specs, sample_weak_spec, AugmentConfig};
use crate::backbone::{
    forward, image_input, optimizer_step, AdamConfig, AdamMoments, Checkpoint, Gradients,
    ModelState, SegModel, StepConfig,
};
use crate::data::{DomainDataset, ImageTensor, Sample, SoftMask};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, es_loss, ESConfig, LossReport};
use crate::tensor::{derive_seed, sigmoid, Plane};

/// Target-domain consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    /// Edge-aware saliency-weighted loss.
    #[default]
    Es,
    /// Plain unweighted BCE against the teacher probabilities.
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageAConfig {
    /// EMA coefficient λ in `[0, 1]`.
    pub lambda_ema: f64,
    pub epochs: usize,
    /// Full batch; split evenly into labeled and target halves.
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) from this index on use `lr / lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Set by the experiment's top-level `loss` block, never read from YAML.
    #[serde(skip)]
    pub es: ESConfig,
    pub consistency: Consistency,
    /// `(height, width)` of augmented crops.
    pub training_size: (usize, usize),
    /// Derived per cycle from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
    pub adam: AdamConfig,
    /// Set by the experiment's top-level `augment` block.
    #[serde(skip)]
    pub augment: AugmentConfig,
    /// Number of most recent epoch checkpoints kept on disk.
    pub keep_checkpoints: usize,
    /// Leading epochs trained on labeled batches only (empty target half).
    /// 0 applies the consistency term from the first step.
    pub warmup_epochs: usize,
}

impl Default for StageAConfig {
    fn default() -> Self {
        Self {
            lambda_ema: 0.996,
            epochs: 40,
            batch_size: 16,
            lr: 1e-4,
            lr_drop_epoch: 30,
            lr_drop_factor: 10.0,
            es: ESConfig::s2c(),
            consistency: Consistency::Es,
            training_size: (64, 64),
            seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            keep_checkpoints: 2,
            warmup_epochs: 0,
        }
    }
}

impl StageAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ema) {
            return Err(Error::Config(format!(
                "lambda_ema must lie in [0, 1], got {}",
                self.lambda_ema
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be ≥ 2 (labeled and target halves)".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0)
            || !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0)
        {
            return Err(Error::Config(
                "lr must be ≥ 0 and lr_drop_factor > 0".into(),
            ));
        }
        if self.training_size.0 < 16 || self.training_size.1 < 16 {
            return Err(Error::Config(format!(
                "training_size too small: {:?}",
                self.training_size
            )));
        }
        self.es.validate()?;
        self.augment.validate()
    }

    pub fn labeled_half(&self) -> usize {
        self.batch_size / 2
    }

    pub fn target_half(&self) -> usize {
        self.batch_size - self.batch_size / 2
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Student, teacher and the student's optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ModelState<f32>,
    pub teacher: ModelState<f32>,
    pub moments: AdamMoments,
    /// Optimizer steps taken so far (the next step is `iteration + 1`).
    pub iteration: u64,
}

impl TrainState {
    /// Teacher initialized as an exact copy of the student, fresh moments.
    pub fn from_student(student: ModelState<f32>) -> Self {
        Self::new(student.clone(), student)
    }

    pub fn new(student: ModelState<f32>, teacher: ModelState<f32>) -> Self {
        let n = student.param_count();
        Self {
            student,
            teacher,
            moments: AdamMoments::zeros(n),
            iteration: 0,
        }
    }
}

/// `p′ = λ·p_teacher + (1−λ)·p_student` for every parameter.
pub fn ema_update(
    teacher: &ModelState<f32>,
    student: &ModelState<f32>,
    lambda_ema: f64,
) -> Result<ModelState<f32>> {
    teacher.ensure_compatible(student)?;
    if !(0.0..=1.0).contains(&lambda_ema) {
        return Err(Error::Config(format!(
            "lambda_ema must lie in [0, 1], got {lambda_ema}"
        )));
    }
    let mut out = teacher.clone();
    for (t, &s) in out.values.iter_mut().zip(&student.values) {
        *t = (lambda_ema * *t as f64 + (1.0 - lambda_ema) * s as f64) as f32;
    }
    Ok(out)
}

/// Per-step inputs that vary with the schedule.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub learning_rate: f64,
    /// Dataset mean color used for cutout fill.
    pub fill: [f32; 3],
}

struct SampleGrad {
    value: f64,
    ea: f64,
    sw: f64,
    grads: Vec<f32>,
}

fn sample_seed(cfg: &StageAConfig, iteration: u64, domain: u64, slot: usize) -> u64 {
    derive_seed(&[cfg.seed, 0xA5, iteration, domain, slot as u64])
}

/// Weakly augmented image and mask of the labeled sample in batch slot
/// `slot` at step `iteration`.
pub fn labeled_view(
    sample: &Sample,
    label: &SoftMask,
    cfg: &StageAConfig,
    iteration: u64,
    slot: usize,
    fill: [f32; 3],
) -> Result<(ImageTensor, SoftMask)> {
    let spec = sample_weak_spec(sample_seed(cfg, iteration, 0, slot), &cfg.augment);
    let (img, mask) = apply(&spec, &sample.image, Some(label), cfg.training_size, fill)?;
    Ok((img, mask.expect("mask passed through")))
}

/// `(weak, strong)` views, sharing one geometry, of the target sample in
/// batch slot `slot` at step `iteration`.
pub fn target_views(
    sample: &Sample,
    cfg: &StageAConfig,
    iteration: u64,
    slot: usize,
    fill: [f32; 3],
) -> Result<(ImageTensor, ImageTensor)> {
    let (weak, strong) = sample_paired_specs(sample_seed(cfg, iteration, 1, slot), &cfg.augment);
    let (weak_img, _) = apply(&weak, &sample.image, None, cfg.training_size, fill)?;
    let (strong_img, _) = apply(&strong, &sample.image, None, cfg.training_size, fill)?;
    Ok((weak_img, strong_img))
}

fn labeled_grad<M: SegModel>(
    model: &M,
    state: &TrainState,
    sample: &Sample,
    cfg: &StageAConfig,
    iteration: u64,
    slot: usize,
    fill: [f32; 3],
) -> Result<SampleGrad> {
    let label = sample.label.as_ref().ok_or_else(|| {
        Error::DomainTag(format!("labeled batch sample `{}` has no label", sample.id))
    })?;
    let (img, mask) = labeled_view(sample, label, cfg, iteration, slot, fill)?;
    let (h, w) = img.shape();
    let mut grads = vec![0.0f32; state.student.param_count()];
    let (logits, cache) = model.forward_cached(&state.student.values, img.pixels(), h, w)?;
    let loss = bce_loss(&logits.map(sigmoid), mask.plane())?;
    model.backward_cached(&state.student.values, &cache, &loss.grad, &mut grads)?;
    Ok(SampleGrad {
        value: loss.value,
        ea: 0.0,
        sw: 0.0,
        grads,
    })
}

fn target_grad<M: SegModel>(
    model: &M,
    state: &TrainState,
    sample: &Sample,
    cfg: &StageAConfig,
    iteration: u64,
    slot: usize,
    fill: [f32; 3],
) -> Result<SampleGrad> {
    let (weak_img, strong_img) = target_views(sample, cfg, iteration, slot, fill)?;
    let (h, w) = weak_img.shape();
    // teacher: forward only, no gradient
    let teacher_p = forward(model, &state.teacher, &weak_img)?.probabilities;
    let mut grads = vec![0.0f32; state.student.param_count()];
    let (logits, cache) = model.forward_cached(&state.student.values, strong_img.pixels(), h, w)?;
    let student_p = logits.map(sigmoid);
    let (value, ea, sw, grad) = match cfg.consistency {
        Consistency::Es => {
            let t = es_loss(&student_p, &teacher_p, &cfg.es)?;
            (t.es, t.ea, t.sw, t.grad)
        }
        Consistency::Bce => {
            let l = bce_loss(&student_p, &teacher_p)?;
            (l.value, 0.0, l.value, l.grad)
        }
    };
    model.backward_cached(&state.student.values, &cache, &grad, &mut grads)?;
    Ok(SampleGrad {
        value,
        ea,
        sw,
        grads,
    })
}

/// One optimization step. `labeled` must be non-empty; an empty `target`
/// batch gives a pure CE step. The teacher is only written by the EMA.
pub fn train_step<M: SegModel>(
    model: &M,
    state: &TrainState,
    labeled: &[&Sample],
    target: &[&Sample],
    cfg: &StageAConfig,
    ctx: &StepContext,
) -> Result<(TrainState, LossReport)> {
    if labeled.is_empty() {
        return Err(Error::Config(
            "train_step needs a non-empty labeled batch".into(),
        ));
    }
    state.student.ensure_compatible(&state.teacher)?;
    let iteration = state.iteration + 1;
    let lab: Vec<SampleGrad> = labeled
        .par_iter()
        .enumerate()
        .map(|(slot, s)| labeled_grad(model, state, s, cfg, iteration, slot, ctx.fill))
        .collect::<Result<_>>()?;
    let tgt: Vec<SampleGrad> = target
        .par_iter()
        .enumerate()
        .map(|(slot, s)| target_grad(model, state, s, cfg, iteration, slot, ctx.fill))
        .collect::<Result<_>>()?;

    let (nl, nt) = (lab.len() as f64, tgt.len().max(1) as f64);
    let ce = lab.iter().map(|g| g.value).sum::<f64>() / nl;
    let per_sample_es: Vec<f64> = tgt.iter().map(|g| g.value).collect();
    let report = LossReport {
        ce,
        ea: tgt.iter().map(|g| g.ea).sum::<f64>() / nt,
        sw: tgt.iter().map(|g| g.sw).sum::<f64>() / nt,
        es: per_sample_es.iter().sum::<f64>() / nt,
        per_sample_es,
    };
    if !report.total().is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            ce: report.ce,
            ea: report.ea,
            sw: report.sw,
            sample_ids: labeled.iter().chain(target).map(|s| s.id.clone()).collect(),
        });
    }

    let mut grads = Gradients::zeros(Arc::clone(&state.student.layout));
    for (part, n) in [(&lab, nl), (&tgt, nt)] {
        let scale = (1.0 / n) as f32;
        for g in part.iter() {
            for (acc, &v) in grads.values.iter_mut().zip(&g.grads) {
                *acc += scale * v;
            }
        }
    }
    let mut next = state.clone();
    optimizer_step(
        &mut next.student,
        &mut next.moments,
        &grads,
        &StepConfig {
            learning_rate: ctx.learning_rate,
            adam: cfg.adam,
            iteration,
        },
    )?;
    next.teacher = ema_update(&state.teacher, &next.student, cfg.lambda_ema)?;
    next.iteration = iteration;
    Ok((next, report))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub epoch: usize,
    pub ce: f64,
    pub ea: f64,
    pub sw: f64,
    pub es: f64,
    pub lr: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,epoch,ce,ea,sw,es,lr";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.epoch, self.ce, self.ea, self.sw, self.es, self.lr
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LogRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Where and under which cycle index epoch checkpoints are written.
#[derive(Clone, Debug, Default)]
pub struct StageAContext {
    pub cycle: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn checkpoint_name(cycle: usize, epoch: usize) -> String {
    format!("ckpt_cycle{cycle}_epoch{epoch}")
}

/// Index stream of length `n` built from concatenated fresh permutations of
/// `0..len`.
fn index_stream(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(n - out.len()));
    }
    out
}

/// Steps per epoch: the larger set is covered once per epoch.
pub fn steps_per_epoch(cfg: &StageAConfig, n_labeled: usize, n_target: usize) -> usize {
    let a = n_labeled.div_ceil(cfg.labeled_half());
    let b = if n_target == 0 {
        0
    } else {
        n_target.div_ceil(cfg.target_half())
    };
    a.max(b)
}

/// Full Stage A. Optimizer moments and the iteration counter start fresh.
/// `target` may be empty (supervised-only training).
pub fn run_stage_a<M: SegModel>(
    model: &M,
    student: ModelState<f32>,
    teacher: ModelState<f32>,
    labeled: &DomainDataset,
    target: &DomainDataset,
    cfg: &StageAConfig,
    ctx: &StageAContext,
) -> Result<(TrainState, Vec<LogRow>)> {
    cfg.validate()?;
    if !labeled.is_labeled() || labeled.is_empty() {
        return Err(Error::Config(format!(
            "labeled set `{}` must be non-empty and fully labeled",
            labeled.name
        )));
    }
    if target.samples().iter().any(|s| s.label.is_some()) {
        return Err(Error::Config(format!(
            "target set `{}` must be unlabeled",
            target.name
        )));
    }
    let mut state = TrainState::new(student, teacher);
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok((state, log));
    }
    let fill = if target.is_empty() {
        labeled.mean_color()
    } else {
        target.mean_color()
    };
    let steps = steps_per_epoch(cfg, labeled.len(), target.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5A, ctx.cycle as u64]));
    let mut written: Vec<PathBuf> = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let li = index_stream(labeled.len(), steps * cfg.labeled_half(), &mut rng);
        let ti = if target.is_empty() {
            Vec::new()
        } else {
            index_stream(target.len(), steps * cfg.target_half(), &mut rng)
        };
        for step in 0..steps {
            let lb: Vec<&Sample> = li[step * cfg.labeled_half()..(step + 1) * cfg.labeled_half()]
                .iter()
                .map(|&i| &labeled.samples()[i])
                .collect();
            let tb: Vec<&Sample> = if target.is_empty() || epoch < cfg.warmup_epochs {
                Vec::new()
            } else {
                ti[step * cfg.target_half()..(step + 1) * cfg.target_half()]
                    .iter()
                    .map(|&i| &target.samples()[i])
                    .collect()
            };
            let (next, report) = train_step(
                model,
                &state,
                &lb,
                &tb,
                cfg,
                &StepContext {
                    learning_rate: lr,
                    fill,
                },
            )?;
            state = next;
            log.push(LogRow {
                iteration: state.iteration,
                epoch,
                ce: report.ce,
                ea: report.ea,
                sw: report.sw,
                es: report.es,
                lr,
            });
        }
        let recent = &log[log.len() - steps..];
        log::info!(
            "cycle {} epoch {}/{}: ce {:.4} es {:.4} lr {:.1e}",
            ctx.cycle,
            epoch + 1,
            cfg.epochs,
            recent.iter().map(|r| r.ce).sum::<f64>() / steps as f64,
            recent.iter().map(|r| r.es).sum::<f64>() / steps as f64,
            lr
        );
        if let Some(dir) = &ctx.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{}.ckpt", checkpoint_name(ctx.cycle, epoch)));
            Checkpoint {
                iteration: state.iteration,
                student: state.student.clone(),
                teacher: state.teacher.clone(),
                moments: state.moments.clone(),
                extra: [
                    ("cycle".to_string(), ctx.cycle.to_string()),
                    ("epoch".to_string(), epoch.to_string()),
                ]
                .into_iter()
                .collect(),
            }
            .save(&path)?;
            written.push(path);
            while written.len() > cfg.keep_checkpoints.max(1) {
                let old = written.remove(0);
                std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
    }
    Ok((state, log))
}

/// Mean per-image BCE of `state` on the un-augmented labeled images.
pub fn dataset_ce<M: SegModel>(
    model: &M,
    state: &ModelState<f32>,
    dataset: &DomainDataset,
) -> Result<f64> {
    let values = dataset
        .samples()
        .par_iter()
        .map(|s| {
            let label = s
                .label
                .as_ref()
                .ok_or_else(|| Error::DomainTag(format!("sample `{}` has no label", s.id)))?;
            let p = forward(model, state, &s.image)?.probabilities;
            Ok(bce_loss(&p, label.plane())?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// Probability maps of `state` on every image, in dataset order.
pub fn predict_dataset<M: SegModel>(
    model: &M,
    state: &ModelState<f32>,
    dataset: &DomainDataset,
) -> Result<Vec<Plane<f32>>> {
    dataset
        .samples()
        .par_iter()
        .map(|s| Ok(forward(model, state, &s.image)?.probabilities))
        .collect()
}

/// Raw model input for callers that bypass augmentation.
pub fn raw_input(sample: &Sample) -> Vec<f32> {
    image_input(&sample.image)
}
