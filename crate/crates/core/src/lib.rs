//! Cycling syn-to-real domain adaptation for binary camouflaged-object
//! segmentation.
//!
//! A student segmenter is trained on labeled synthetic images while an EMA
//! teacher supervises it on unlabeled real images (stage A). Between training
//! cycles the frozen pair selects confident teacher pseudo labels, which are
//! merged into the labeled pool for the next cycle (stage B).

pub mod augment;
pub mod backbone;
pub mod cycler;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod stage_a;
pub mod stage_b;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
