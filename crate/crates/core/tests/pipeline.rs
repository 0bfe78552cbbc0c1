//! Stage A, Stage B and the cycler on small generated data.

use std::sync::Arc;

use csrda::backbone::{
    backward, forward, optimizer_step, Gradients, SegModel, StepConfig, UNet, UNetConfig,
};
use csrda::cycler::{
    run_baseline_with, run_csrda_with, BaselineMode, DataSource, ExperimentConfig, MemorySource,
    Phase, Profile, Split,
};
use csrda::data::DomainDataset;
use csrda::losses::bce_loss;
use csrda::stage_a::{
    dataset_ce, ema_update, labeled_view, run_stage_a, target_views, train_step, Consistency,
    StageAConfig, StageAContext, StepContext, TrainState,
};
use csrda::stage_b::{build_evolving_domain, score_target_set, select_confident, CLSConfig};
use csrda::synthgen::{GenPlan, SplitSpec};

fn small_plan(seed: u64) -> Vec<DomainDataset> {
    let plan = GenPlan {
        seed,
        size: (32, 32),
        splits: GenPlan::default()
            .splits
            .into_iter()
            .map(|s| SplitSpec {
                count: if s.name == "target_test" { 6 } else { 12 },
                ..s
            })
            .collect(),
        ..GenPlan::default()
    };
    plan.generate().unwrap()
}

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_profile(Profile::Toy);
    c.model = UNetConfig {
        in_channels: 3,
        widths: vec![4, 8],
        gn_groups: 2,
    };
    c.stage_a.epochs = 2;
    c.stage_a.lr_drop_epoch = 1;
    c.stage_a.warmup_epochs = 0;
    c.stage_a.batch_size = 8;
    c.stage_a.training_size = (32, 32);
    c.paths.output_dir = dir.to_path_buf();
    c
}

fn memory(sets: &[DomainDataset]) -> MemorySource {
    MemorySource::new(sets[0].clone(), sets[1].clone(), sets[2].clone())
}

#[test]
fn single_cycle_runs_no_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        cycles: 1,
        ..small_config(dir.path())
    };
    let sets = small_plan(1);
    let out = run_csrda_with(
        &UNet::new(cfg.model.clone()).unwrap(),
        &cfg,
        &mut memory(&sets),
    )
    .unwrap();
    assert_eq!(out.cycles.len(), 1);
    assert!(out.selection_reports().is_empty());
    assert_eq!(out.cycles[0].labeled_size, sets[0].len());
    assert!(!dir.path().join("selection_cycle1.json").exists());
    for f in [
        "config.yaml",
        "train_log_cycle1.csv",
        "metrics_cycle1.json",
        "final.ckpt",
        "path_audit.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_dir(dir.path().join("predictions"))
            .unwrap()
            .count(),
        sets[2].len()
    );
    let log = std::fs::read_to_string(dir.path().join("train_log_cycle1.csv")).unwrap();
    assert!(log.starts_with("iteration,epoch,ce,ea,sw,es,lr\n"));
}

#[test]
fn two_cycles_record_one_selection_and_grow_the_labeled_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sets = small_plan(2);
    let out = run_csrda_with(
        &UNet::new(cfg.model.clone()).unwrap(),
        &cfg,
        &mut memory(&sets),
    )
    .unwrap();
    assert_eq!(out.selection_reports().len(), 1);
    let sel = out.selection_reports()[0];
    assert_eq!(
        out.cycles[1].labeled_size,
        sets[0].len() + sel.selected_ids.len()
    );
    assert!(out.cycles[1].labeled_size >= sets[0].len());
    assert!(dir.path().join("selection_cycle1.json").exists());
    // the test split is only ever read for evaluation
    assert!(out
        .audit
        .iter()
        .all(|a| a.split != Split::TargetTest || a.phase == Phase::Evaluate));
    assert!(out.audit.iter().any(|a| a.split == Split::TargetTest));
}

#[test]
fn later_selections_replace_earlier_pseudo_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        cycles: 3,
        ..small_config(dir.path())
    };
    // every target sample passes both filters in every cycle
    cfg.cls = CLSConfig { mu: 1e9, tau: 0.0 };
    let sets = small_plan(3);
    let out = run_csrda_with(
        &UNet::new(cfg.model.clone()).unwrap(),
        &cfg,
        &mut memory(&sets),
    )
    .unwrap();
    let sizes: Vec<usize> = out.cycles.iter().map(|c| c.labeled_size).collect();
    let (ns, nt) = (sets[0].len(), sets[1].len());
    assert_eq!(sizes, vec![ns, ns + nt, ns + nt]);
    let reports = out.selection_reports();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].selected_ids, reports[1].selected_ids);
    assert_eq!((reports[0].cycle, reports[1].cycle), (1, 2));
}

#[test]
fn source_only_never_touches_target_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sets = small_plan(4);
    let out = run_baseline_with(
        &UNet::new(cfg.model.clone()).unwrap(),
        &cfg,
        BaselineMode::SourceOnly,
        &mut memory(&sets),
    )
    .unwrap();
    assert!(out.audit.iter().all(|a| a.split != Split::TargetTrain));
    assert!(out.cycles[0].log.iter().all(|r| r.es == 0.0));
    let mt = run_baseline_with(
        &UNet::new(cfg.model.clone()).unwrap(),
        &cfg,
        BaselineMode::MeanTeacher,
        &mut memory(&sets),
    )
    .unwrap();
    assert!(mt.audit.iter().any(|a| a.split == Split::TargetTrain));
    assert!(mt.cycles[0].log.iter().all(|r| r.ea == 0.0 && r.es > 0.0));
}

#[test]
fn test_split_is_refused_outside_evaluation() {
    let sets = small_plan(5);
    let mut m = memory(&sets);
    assert!(m.load(Split::TargetTest, Phase::Train).is_err());
    assert!(m.load(Split::TargetTest, Phase::Select).is_err());
    assert!(m.load(Split::TargetTest, Phase::Evaluate).is_ok());
    let tt = m.load(Split::TargetTrain, Phase::Train).unwrap();
    assert!(tt.samples().iter().all(|s| s.label.is_none()));
}

#[test]
fn identical_configs_give_identical_runs() {
    let sets = small_plan(6);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        run_csrda_with(
            &UNet::new(cfg.model.clone()).unwrap(),
            &cfg,
            &mut memory(&sets),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.selection_reports(), b.selection_reports());
    assert_eq!(a.final_metrics, b.final_metrics);
    assert_eq!(a.final_state, b.final_state);
}

#[test]
fn stage_b_leaves_models_untouched_and_conserves_source() {
    let sets = small_plan(7);
    let net = UNet::new(UNetConfig {
        in_channels: 3,
        widths: vec![4, 8],
        gn_groups: 2,
    })
    .unwrap();
    let (s, t) = (net.init_state(1), net.init_state(2));
    let (hs, ht) = (s.fingerprint(), t.fingerprint());
    let target = sets[1].without_labels("t");
    let es = csrda::losses::ESConfig::s2c();
    let scores = score_target_set(&net, &s, &t, &target, &es).unwrap();
    assert_eq!(
        scores,
        score_target_set(&net, &s, &t, &target, &es).unwrap()
    );
    let (d_cl, _) = select_confident(
        &net,
        &scores,
        &t,
        &target,
        &CLSConfig { mu: 10.0, tau: 0.0 },
        1,
    )
    .unwrap();
    assert_eq!((s.fingerprint(), t.fingerprint()), (hs, ht));
    let evolving = build_evolving_domain(&sets[0], &d_cl).unwrap();
    assert_eq!(&evolving.samples()[..sets[0].len()], sets[0].samples());
    // identical models: zero edge term for every sample
    let same = score_target_set(
        &net,
        &s,
        &s,
        &target,
        &csrda::losses::ESConfig {
            alpha: 1.0,
            beta: 0.0,
            delta: 0.5,
        },
    )
    .unwrap();
    assert!(same.values().all(|&v| v == 0.0));
}

#[test]
fn bce_consistency_step_matches_manual_composition() {
    let sets = small_plan(8);
    let net = UNet::new(UNetConfig {
        in_channels: 3,
        widths: vec![4, 8],
        gn_groups: 2,
    })
    .unwrap();
    let cfg = StageAConfig {
        consistency: Consistency::Bce,
        training_size: (32, 32),
        batch_size: 4,
        lr: 1e-3,
        lambda_ema: 0.9,
        seed: 5,
        ..StageAConfig::default()
    };
    let state = TrainState::new(net.init_state(1), net.init_state(2));
    let labeled: Vec<_> = sets[0].samples()[..2].iter().collect();
    let target_set = sets[1].without_labels("t");
    let target: Vec<_> = target_set.samples()[..2].iter().collect();
    let ctx = StepContext {
        learning_rate: cfg.lr,
        fill: [0.5; 3],
    };
    let (next, report) = train_step(&net, &state, &labeled, &target, &cfg, &ctx).unwrap();

    // rebuild the same step from public parts
    let mut grads = Gradients::zeros(Arc::clone(&state.student.layout));
    let (mut ce, mut cons) = (0.0, 0.0);
    for (slot, s) in labeled.iter().enumerate() {
        let (img, mask) =
            labeled_view(s, s.label.as_ref().unwrap(), &cfg, 1, slot, ctx.fill).unwrap();
        let p = forward(&net, &state.student, &img).unwrap().probabilities;
        let l = bce_loss(&p, mask.plane()).unwrap();
        ce += l.value / 2.0;
        let g = backward(&net, &state.student, &img, &l.grad).unwrap();
        grads
            .values
            .iter_mut()
            .zip(&g.values)
            .for_each(|(a, b)| *a += 0.5 * b);
    }
    for (slot, s) in target.iter().enumerate() {
        let (weak, strong) = target_views(s, &cfg, 1, slot, ctx.fill).unwrap();
        let pt = forward(&net, &state.teacher, &weak).unwrap().probabilities;
        let ps = forward(&net, &state.student, &strong)
            .unwrap()
            .probabilities;
        let l = bce_loss(&ps, &pt).unwrap();
        cons += l.value / 2.0;
        let g = backward(&net, &state.student, &strong, &l.grad).unwrap();
        grads
            .values
            .iter_mut()
            .zip(&g.values)
            .for_each(|(a, b)| *a += 0.5 * b);
    }
    let mut student = state.student.clone();
    let mut moments = state.moments.clone();
    optimizer_step(
        &mut student,
        &mut moments,
        &grads,
        &StepConfig {
            learning_rate: cfg.lr,
            adam: cfg.adam,
            iteration: 1,
        },
    )
    .unwrap();
    let teacher = ema_update(&state.teacher, &student, cfg.lambda_ema).unwrap();

    assert!((report.ce - ce).abs() < 1e-6 && (report.es - cons).abs() < 1e-6);
    assert!((report.total() - (report.ce + report.es)).abs() < 1e-12);
    for (a, b) in next.student.values.iter().zip(&student.values) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    for (a, b) in next.teacher.values.iter().zip(&teacher.values) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn toy_training_halves_source_ce() {
    let plan = GenPlan::default();
    let source = &plan.generate().unwrap()[0];
    let cfg = ExperimentConfig::for_profile(Profile::Toy);
    let net = UNet::new(cfg.model.clone()).unwrap();
    let init = net.init_state(0);
    let before = dataset_ce(&net, &init, source).unwrap();
    let (state, _) = run_stage_a(
        &net,
        init.clone(),
        init,
        source,
        &DomainDataset::empty("none"),
        &cfg.stage_config(1),
        &StageAContext::default(),
    )
    .unwrap();
    let after = dataset_ce(&net, &state.teacher, source).unwrap();
    assert!(after <= 0.5 * before, "CE {before} -> {after}");
}
