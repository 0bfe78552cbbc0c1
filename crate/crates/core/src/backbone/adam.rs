use serde::{Deserialize, Serialize};

use super::state::{Gradients, ModelState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// 1-based step index used for bias correction.
    pub iteration: u64,
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update. Gradients are validated before anything
/// is written, so a failed step leaves `state` and `moments` untouched.
pub fn optimizer_step(
    state: &mut ModelState<f32>,
    moments: &mut AdamMoments,
    grads: &Gradients<f32>,
    cfg: &StepConfig,
) -> Result<()> {
    if grads.values.len() != state.values.len()
        || moments.m.len() != state.values.len()
        || moments.v.len() != state.values.len()
    {
        return Err(Error::Config(
            "gradient/moment shapes do not match parameters".into(),
        ));
    }
    grads.check_finite()?;
    if cfg.iteration == 0 {
        return Err(Error::Config("Adam iteration is 1-based".into()));
    }
    let AdamConfig { beta1, beta2, eps } = cfg.adam;
    let t = cfg.iteration as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let lr = cfg.learning_rate;
    for (((p, m), v), &g) in state
        .values
        .iter_mut()
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
        .zip(&grads.values)
    {
        let g = g as f64;
        let m64 = beta1 * *m as f64 + (1.0 - beta1) * g;
        let v64 = beta2 * *v as f64 + (1.0 - beta2) * g * g;
        *m = m64 as f32;
        *v = v64 as f32;
        if lr != 0.0 {
            *p -= (lr * (m64 / bc1) / ((v64 / bc2).sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backbone::ParamLayout;

    fn scalar(p: f32) -> (ModelState<f32>, Gradients<f32>) {
        let mut layout = ParamLayout::new();
        layout.push("p", &[1]);
        let layout = Arc::new(layout);
        (
            ModelState::new("scalar", Arc::clone(&layout), vec![p]).unwrap(),
            Gradients::zeros(layout),
        )
    }

    fn cfg(lr: f64, iteration: u64) -> StepConfig {
        StepConfig {
            learning_rate: lr,
            adam: AdamConfig::default(),
            iteration,
        }
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let (mut s, mut g) = scalar(1.0);
        g.values[0] = 1.0;
        let mut mom = AdamMoments::zeros(1);
        optimizer_step(&mut s, &mut mom, &g, &cfg(0.1, 1)).unwrap();
        // m̂ = v̂ = 1 → p' = 1 − 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.values[0] as f64 - expected).abs() < 1e-7);
        assert!((mom.m[0] - 0.1).abs() < 1e-7);
        assert!((mom.v[0] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let (mut s, g) = scalar(0.5);
        let mut mom = AdamMoments {
            m: vec![0.2],
            v: vec![0.04],
        };
        optimizer_step(&mut s, &mut mom, &g, &cfg(0.1, 3)).unwrap();
        assert!((mom.m[0] - 0.18).abs() < 1e-7);
        assert!((mom.v[0] - 0.04 * 0.999).abs() < 1e-8);
        // zero gradients from a fresh start leave the parameter unchanged
        let (mut s2, g2) = scalar(0.5);
        let mut fresh = AdamMoments::zeros(1);
        optimizer_step(&mut s2, &mut fresh, &g2, &cfg(0.1, 1)).unwrap();
        assert_eq!(s2.values[0], 0.5);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (mut s, mut g) = scalar(0.7);
        g.values[0] = 3.0;
        let mut mom = AdamMoments::zeros(1);
        optimizer_step(&mut s, &mut mom, &g, &cfg(0.0, 1)).unwrap();
        assert_eq!(s.values[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_state() {
        let (mut s, mut g) = scalar(0.7);
        g.values[0] = f32::NAN;
        let mut mom = AdamMoments::zeros(1);
        match optimizer_step(&mut s, &mut mom, &g, &cfg(0.1, 1)) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.values[0], 0.7);
        assert_eq!(mom, AdamMoments::zeros(1));
    }
}
