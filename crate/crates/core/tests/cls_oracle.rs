//! Confident label selection against an exhaustive transcription.

mod common;

use std::collections::BTreeMap;

use common::{cls_instance as instance, oracle_cls, Instance};
use csrda::backbone::{forward, SegModel, UNet, UNetConfig};
use csrda::stage_b::{select_confident, select_from_predictions, CLSConfig};
use csrda::tensor::Plane;

fn score_map(inst: &Instance) -> BTreeMap<String, f64> {
    inst.target
        .ids()
        .zip(&inst.scores)
        .map(|(id, &s)| (id.to_string(), s))
        .collect()
}

fn expected_ids(inst: &Instance, probs: &[Vec<f64>]) -> Vec<String> {
    oracle_cls(&inst.scores, probs, inst.cfg.mu, inst.cfg.tau)
        .into_iter()
        .map(|i| inst.target.samples()[i].id.clone())
        .collect()
}

#[test]
fn selection_equals_brute_force() {
    for seed in 0..50 {
        let inst = instance(seed);
        let probs: BTreeMap<String, Plane<f32>> = inst
            .target
            .ids()
            .map(str::to_owned)
            .zip(inst.probs.iter().cloned())
            .collect();
        let (d_cl, rep) =
            select_from_predictions(&score_map(&inst), &probs, &inst.target, &inst.cfg, 1).unwrap();
        let oracle_probs: Vec<Vec<f64>> = inst
            .probs
            .iter()
            .map(|p| p.data.iter().map(|&v| v as f64).collect())
            .collect();
        let expected = expected_ids(&inst, &oracle_probs);
        assert_eq!(rep.selected_ids, expected, "seed {seed}");
        let got: Vec<String> = d_cl
            .ids()
            .map(|id| id.trim_start_matches("cl1/").to_string())
            .collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn model_backed_selection_equals_brute_force() {
    let net = UNet::new(UNetConfig {
        in_channels: 3,
        widths: vec![4, 8],
        gn_groups: 2,
    })
    .unwrap();
    for seed in 0..5 {
        let inst = instance(100 + seed);
        let teacher = net.init_state(seed);
        let oracle_probs: Vec<Vec<f64>> = inst
            .target
            .samples()
            .iter()
            .map(|s| {
                forward(&net, &teacher, &s.image)
                    .unwrap()
                    .probabilities
                    .data
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            })
            .collect();
        let cfg = CLSConfig {
            tau: 0.45,
            ..inst.cfg
        };
        let inst = Instance { cfg, ..inst };
        let (_, rep) = select_confident(
            &net,
            &score_map(&inst),
            &teacher,
            &inst.target,
            &inst.cfg,
            1,
        )
        .unwrap();
        assert_eq!(
            rep.selected_ids,
            expected_ids(&inst, &oracle_probs),
            "seed {seed}"
        );
    }
}

#[test]
fn loss_selection_is_monotone_in_mu() {
    for seed in 0..50 {
        let inst = instance(seed);
        let probs: BTreeMap<String, Plane<f32>> = inst
            .target
            .ids()
            .map(str::to_owned)
            .zip(inst.probs.iter().cloned())
            .collect();
        let mut prev: Option<Vec<String>> = None;
        for mu in [0.1, 0.5, 0.8, 1.0, 1.3, 2.0, 1e6] {
            let cfg = CLSConfig { mu, ..inst.cfg };
            let (_, rep) =
                select_from_predictions(&score_map(&inst), &probs, &inst.target, &cfg, 1).unwrap();
            if let Some(p) = &prev {
                assert!(
                    p.iter().all(|id| rep.loss_selected_ids.contains(id)),
                    "seed {seed} mu {mu}"
                );
            }
            prev = Some(rep.loss_selected_ids);
        }
        assert_eq!(
            prev.unwrap().len(),
            inst.target.len(),
            "huge mu passes every sample"
        );
    }
}
