//! Phenotype-aware multiple instance learning at desk scale.
//!
//! The crate trains a cross-attention MIL student over patch-feature bags,
//! a gene-set MLP teacher over transcriptomes, distills the teacher into the
//! student at the feature and saliency level, and ships evaluation metrics,
//! Shapley attribution, and a CLI for reproducible runs over synthetic
//! planted-truth cohorts.

pub mod cli;
pub mod databag;
pub mod diff;
pub mod error;
pub mod explain;
pub mod gpnn;
pub mod knowledge;
pub mod metrics;
pub mod pamil;
pub mod trainer;

pub use error::{Error, Result};
