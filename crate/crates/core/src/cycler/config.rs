//! Experiment configuration: task profiles deep-merged with YAML overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::augment::AugmentConfig;
use crate::backbone::UNetConfig;
use crate::error::{Error, Result};
use crate::losses::ESConfig;
use crate::stage_a::StageAConfig;
use crate::stage_b::CLSConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Synthetic source built from salient-object data.
    #[default]
    S2c,
    /// Synthetic source built from other camouflage data.
    C2c,
    /// Desk-scale setting used by the toy generator.
    Toy,
}

/// Initialization of student and teacher at the start of cycles ≥ 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    /// Both copy the previous cycle's final teacher.
    #[default]
    Teacher,
    /// Both copy the previous cycle's final student.
    Student,
    /// Both re-initialized from a cycle-specific seed.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub source_dir: PathBuf,
    pub target_train_dir: PathBuf,
    pub target_test_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            source_dir: "data/source".into(),
            target_train_dir: "data/target_train".into(),
            target_test_dir: "data/target_test".into(),
            output_dir: "runs/csrda".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Number of Stage A invocations, ≥ 1.
    pub cycles: usize,
    /// Master seed; every per-cycle and per-component stream derives from it.
    pub seed: u64,
    pub stage_a: StageAConfig,
    pub loss: ESConfig,
    pub cls: CLSConfig,
    pub augment: AugmentConfig,
    pub model: UNetConfig,
    pub paths: Paths,
    /// Evaluate the teacher on the test split after every cycle, not only the last.
    pub eval_every_cycle: bool,
    pub warm_start: WarmStart,
    /// Write the final teacher's test predictions as PNGs.
    pub save_predictions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_profile(Profile::S2c)
    }
}

impl ExperimentConfig {
    /// Built-in defaults of a profile.
    pub fn for_profile(profile: Profile) -> Self {
        let mut cfg = Self {
            profile,
            cycles: 2,
            seed: 0,
            stage_a: StageAConfig::default(),
            loss: ESConfig::s2c(),
            cls: CLSConfig::s2c(),
            augment: AugmentConfig::default(),
            model: UNetConfig::default(),
            paths: Paths::default(),
            eval_every_cycle: false,
            warm_start: WarmStart::Teacher,
            save_predictions: true,
        };
        match profile {
            Profile::S2c => {}
            Profile::C2c => {
                cfg.stage_a.lambda_ema = 0.9996;
                cfg.cls = CLSConfig::c2c();
                cfg.loss = ESConfig::c2c();
            }
            Profile::Toy => {
                // one CPU core: a narrower U-Net and a short, fast schedule
                cfg.model.widths = vec![8, 16, 32, 64];
                cfg.stage_a.epochs = 15;
                cfg.stage_a.lr_drop_epoch = 11;
                cfg.stage_a.lr = 1e-3;
                cfg.stage_a.lambda_ema = 0.99;
                cfg.stage_a.keep_checkpoints = 1;
                // consistency starts once the teacher separates objects, and a
                // weak edge term keeps flat maps from being the cheapest match
                cfg.stage_a.warmup_epochs = 5;
                cfg.loss.alpha = 0.1;
            }
        }
        cfg
    }

    /// Profile defaults (from the `profile` key, `s2c` if absent) overlaid with
    /// every key present in `user`.
    pub fn from_value(user: Value) -> Result<Self> {
        let profile = match user.get("profile") {
            Some(p) => serde_yaml::from_value(p.clone())
                .map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::default(),
        };
        let mut base = serde_yaml::to_value(Self::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        deep_merge(&mut base, user);
        let cfg: Self = serde_yaml::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_yaml_str(text: &str) -> Result<Self> {
        let value: Value = serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(if value.is_null() {
            Value::Mapping(Default::default())
        } else {
            value
        })
    }

    pub fn from_yaml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml_str(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with one dotted key (`loss.alpha`, `cls.tau`, ...) replaced.
    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut v = serde_yaml::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut v;
        for part in key.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *node = value;
        let cfg: Self =
            serde_yaml::from_value(v).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be ≥ 1".into()));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.cls.validate()?;
        self.stage_config(1).validate()
    }

    /// Stage A settings for `cycle` (1-based), with the shared loss and
    /// augmentation blocks and a cycle-specific seed.
    pub fn stage_config(&self, cycle: usize) -> StageAConfig {
        StageAConfig {
            es: self.loss,
            augment: self.augment.clone(),
            seed: super::seeds::stage_a(self.seed, cycle),
            ..self.stage_a.clone()
        }
    }
}

/// Recursive overlay: mappings merge key by key, anything else replaces.
pub fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Mapping(b), Value::Mapping(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Shorthand sweep names mapped to config keys; dotted keys pass through.
pub fn sweep_key(param: &str) -> &str {
    match param {
        "alpha" => "loss.alpha",
        "beta" => "loss.beta",
        "delta" => "loss.delta",
        "mu" => "cls.mu",
        "tau" => "cls.tau",
        "lambda" | "lambda_ema" => "stage_a.lambda_ema",
        "lr" => "stage_a.lr",
        "epochs" => "stage_a.epochs",
        "cycles" => "cycles",
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        let c = ExperimentConfig::from_yaml_str("profile: c2c").unwrap();
        assert_eq!(c.stage_a.lambda_ema, 0.9996);
        assert_eq!((c.cls.mu, c.cls.tau, c.loss.alpha), (1.0, 0.5, 0.7));
        let s = ExperimentConfig::from_yaml_str("").unwrap();
        assert_eq!(
            (s.stage_a.lambda_ema, s.cls.mu, s.cls.tau, s.loss.alpha),
            (0.996, 0.8, 0.4, 0.9)
        );
        assert_eq!(s.cycles, 2);
    }

    #[test]
    fn overrides_merge_deeply() {
        let c = ExperimentConfig::from_yaml_str(
            "profile: toy\ncls:\n  tau: 0.3\nstage_a:\n  epochs: 3\n",
        )
        .unwrap();
        assert_eq!(c.cls.tau, 0.3);
        assert_eq!(c.cls.mu, 0.8);
        assert_eq!(c.stage_a.epochs, 3);
        assert_eq!(c.stage_a.lr, 1e-3);
        assert_eq!(c.model.widths, vec![8, 16, 32, 64]);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        assert!(ExperimentConfig::from_yaml_str("nonsense: 1").is_err());
        assert!(ExperimentConfig::from_yaml_str("stage_a:\n  es:\n    alpha: 1").is_err());
        assert!(ExperimentConfig::from_yaml_str("cycles: 0").is_err());
        assert!(ExperimentConfig::from_yaml_str("cls:\n  tau: 2").is_err());
    }

    #[test]
    fn yaml_round_trip_and_override() {
        let c = ExperimentConfig::for_profile(Profile::Toy);
        assert_eq!(
            ExperimentConfig::from_yaml_str(&c.to_yaml().unwrap()).unwrap(),
            c
        );
        let o = c
            .with_override(sweep_key("alpha"), Value::from(0.3))
            .unwrap();
        assert_eq!(o.loss.alpha, 0.3);
        assert_eq!(o.stage_config(1).es.alpha, 0.3);
        assert!(c.with_override("loss.gamma", Value::from(1.0)).is_err());
    }

    #[test]
    fn cycle_seeds_differ() {
        let c = ExperimentConfig::default();
        assert_ne!(c.stage_config(1).seed, c.stage_config(2).seed);
        assert_eq!(c.stage_config(2).seed, c.stage_config(2).seed);
    }
}
