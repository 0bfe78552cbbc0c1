//! Library metrics against literal transcriptions, plus anchor cases.

mod common;

use common::*;
use csrda::metrics::{
    e_measure, evaluate_image, f_measure, mae, nearest_foreground, s_measure, weighted_f_measure,
    weighted_f_measure_with, BackgroundWeighting,
};
use csrda::tensor::Plane;

const TOL: f64 = 1e-9;
const N: usize = 16;

fn instances(family: u64) -> Vec<(Plane<f64>, Plane<f64>)> {
    (0..25)
        .map(|i| {
            let mut r = rng(family * 1000 + i);
            let gt = random_gt(&mut r, N, N);
            (random_pred(&mut r, &gt), gt)
        })
        .collect()
}

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: {a} vs {b}");
}

#[test]
fn f_measure_matches_oracle() {
    for (p, g) in instances(1) {
        let f = f_measure(&p, &g).unwrap();
        let (ad, mn, mx) = oracle_f(&p, &g);
        close(f.adaptive, ad, "f_ad");
        close(f.mean, mn, "f_mn");
        close(f.max, mx, "f_mx");
    }
}

#[test]
fn e_measure_matches_oracle() {
    for (p, g) in instances(2) {
        let e = e_measure(&p, &g).unwrap();
        let (ad, mn, mx) = oracle_e(&p, &g);
        close(e.adaptive, ad, "e_ad");
        close(e.mean, mn, "e_mn");
        close(e.max, mx, "e_mx");
    }
}

#[test]
fn s_measure_matches_oracle() {
    for (p, g) in instances(3) {
        close(s_measure(&p, &g).unwrap(), oracle_s(&p, &g), "s");
    }
}

#[test]
fn weighted_f_matches_oracle() {
    for (p, g) in instances(4) {
        close(
            weighted_f_measure(&p, &g).unwrap(),
            oracle_wf(&p, &g, decay_weight),
            "wf decay",
        );
        close(
            weighted_f_measure_with(&p, &g, BackgroundWeighting::Margolin).unwrap(),
            oracle_wf(&p, &g, margolin_weight),
            "wf margolin",
        );
    }
}

#[test]
fn mae_matches_oracle() {
    for (p, g) in instances(5) {
        close(mae(&p, &g).unwrap(), oracle_mae(&p, &g), "mae");
    }
}

#[test]
fn distance_transform_matches_exhaustive_search() {
    for (_, g) in instances(6) {
        let (d, idx) = nearest_foreground(&g);
        for (i, (od, oi)) in oracle_nearest(&g).into_iter().enumerate() {
            assert_eq!(idx[i], oi);
            close(d[i], od, "distance");
        }
    }
}

#[test]
fn perfect_prediction_anchors() {
    for (_, g) in instances(7) {
        let m = evaluate_image(&g, &g).unwrap();
        for (name, v) in [
            ("s", m.s_alpha),
            ("wf", m.f_beta_w),
            ("e_ad", m.e_ad),
            ("e_mn", m.e_mn),
            ("e_mx", m.e_mx),
            ("f_ad", m.f_ad),
            ("f_mn", m.f_mn),
            ("f_mx", m.f_mx),
        ] {
            close(v, 1.0, name);
        }
        assert_eq!(m.mae, 0.0);
    }
}

#[test]
fn complement_prediction_anchors() {
    for (_, g) in instances(8) {
        let m = evaluate_image(&g.map(|v| 1.0 - v), &g).unwrap();
        assert_eq!(m.mae, 1.0);
        assert_eq!((m.f_ad, m.f_mn, m.f_mx), (0.0, 0.0, 0.0));
        assert!(m.e_mx < 1e-9, "e {}", m.e_mx);
        assert!(m.s_alpha < 0.2, "s {}", m.s_alpha);
    }
}

#[test]
fn all_zero_prediction_has_zero_f() {
    let g = instances(9).remove(0).1;
    let m = evaluate_image(&Plane::filled(N, N, 0.0), &g).unwrap();
    assert_eq!((m.f_ad, m.f_mn, m.f_mx), (0.0, 0.0, 0.0));
}

#[test]
fn max_dominates_mean() {
    for i in 0..100 {
        let mut r = rng(50_000 + i);
        let g = random_gt(&mut r, N, N);
        let p = random_pred(&mut r, &g);
        let f = f_measure(&p, &g).unwrap();
        let e = e_measure(&p, &g).unwrap();
        assert!(f.max >= f.mean && e.max >= e.mean);
    }
}

#[test]
fn complement_weighted_f_is_near_zero() {
    let mut checked = 0;
    for i in 0.. {
        let mut r = rng(9000 + i);
        let g = random_gt(&mut r, 32, 32);
        if !(0.1..=0.9).contains(&g.mean()) {
            continue;
        }
        let v = weighted_f_measure(&g.map(|v| 1.0 - v), &g).unwrap();
        assert!(v < 0.05, "mask {i}: {v}");
        checked += 1;
        if checked == 100 {
            break;
        }
    }
}
