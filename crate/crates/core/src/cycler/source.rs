//! Dataset access for experiment runs. Every load is recorded with the phase
//! that requested it, and the test split refuses any phase but evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::Paths;
use crate::data::{load_dataset, DomainDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Select,
    Evaluate,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Select => "select",
            Phase::Evaluate => "evaluate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub split: Split,
    pub phase: Phase,
    /// Directory read, or `memory:<name>` for in-memory sets.
    pub location: String,
}

/// Provider of the three experiment splits.
pub trait DataSource {
    /// Loads `split` on behalf of `phase`. Must fail for the test split outside
    /// evaluation. Target-train data is returned unlabeled.
    fn load(&mut self, split: Split, phase: Phase) -> Result<DomainDataset>;
    fn audit(&self) -> &[AuditEntry];
}

fn guard(split: Split, phase: Phase) -> Result<()> {
    if split == Split::TargetTest && phase != Phase::Evaluate {
        return Err(Error::Config(format!(
            "test split requested during {phase}"
        )));
    }
    Ok(())
}

/// Reads the directory layout of [`crate::data::load_dataset`].
#[derive(Clone, Debug)]
pub struct DirSource {
    pub paths: Paths,
    log: Vec<AuditEntry>,
}

impl DirSource {
    pub fn new(paths: Paths) -> Self {
        Self {
            paths,
            log: Vec::new(),
        }
    }
}

impl DataSource for DirSource {
    fn load(&mut self, split: Split, phase: Phase) -> Result<DomainDataset> {
        guard(split, phase)?;
        let (dir, labeled) = match split {
            Split::Source => (&self.paths.source_dir, true),
            Split::TargetTrain => (&self.paths.target_train_dir, false),
            Split::TargetTest => (&self.paths.target_test_dir, true),
        };
        self.log.push(AuditEntry {
            split,
            phase,
            location: dir.display().to_string(),
        });
        load_dataset(dir, labeled)
    }

    fn audit(&self) -> &[AuditEntry] {
        &self.log
    }
}

/// Pre-built datasets, e.g. straight from the generator.
#[derive(Clone, Debug)]
pub struct MemorySource {
    pub source: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
    log: Vec<AuditEntry>,
}

impl MemorySource {
    pub fn new(
        source: DomainDataset,
        target_train: DomainDataset,
        target_test: DomainDataset,
    ) -> Self {
        Self {
            source,
            target_train,
            target_test,
            log: Vec::new(),
        }
    }
}

impl DataSource for MemorySource {
    fn load(&mut self, split: Split, phase: Phase) -> Result<DomainDataset> {
        guard(split, phase)?;
        let ds = match split {
            Split::Source => self.source.clone(),
            Split::TargetTrain => self
                .target_train
                .without_labels(self.target_train.name.clone()),
            Split::TargetTest => self.target_test.clone(),
        };
        self.log.push(AuditEntry {
            split,
            phase,
            location: format!("memory:{}", ds.name),
        });
        Ok(ds)
    }

    fn audit(&self) -> &[AuditEntry] {
        &self.log
    }
}
