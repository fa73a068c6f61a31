//! Ensemble toolkit for image-level classifiers.
//!
//! The pipeline runs over metadata and score tables only, so any set of base
//! classifiers can feed it:
//!
//! 1. [`manifest`]: stratified train/val/test splitting of a dataset inventory;
//! 2. [`augment`]: per-split class balancing with horizontal and vertical mirror flips;
//! 3. [`predictions`]: loading and aligning each classifier's probability table;
//! 4. [`ensemble`]: weighted and majority voting, log-odds weights, pruning and
//!    exhaustive search for voting weights on a quantized simplex;
//! 5. [`metrics`] and [`report`]: confusion matrices, precision/recall/F-scores,
//!    average precision, and the comparison report.

pub mod augment;
pub mod ensemble;
pub mod error;
pub mod fixtures;
pub mod manifest;
pub mod metrics;
pub mod predictions;
pub mod report;

pub use error::{Error, Result};
