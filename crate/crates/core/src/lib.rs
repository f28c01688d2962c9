//! Condition-guided domain adaptation for semantic segmentation on a
//! procedural weather world: style translation, condition-attention
//! segmentation, condition-specific adversarial training and
//! ambivalence-weighted self-training.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod pipeline;
pub mod plot;
pub mod segnet;
pub mod selftrain;
pub mod toyworld;
pub mod translator;

pub use error::{Error, Result};
