//! Concept-drift detection and adaptation for streaming Gaussian mixture
//! classifiers.
//!
//! - [`mixture`]: diagonal Gaussian mixtures (density, moments, sampling).
//! - [`em`]: EM fitting and BIC model-order selection.
//! - [`kde`]: 1-d kernel density estimates and window divergences.
//! - [`kd3`]: the windowed kernel-density drift detector.
//! - [`cmgmm`]: combine-merge adaptation with component pruning.
//! - [`classifier`]: per-class models and detectors, test-then-train steps.
//! - [`streamgen`]: synthetic drift streams with ground-truth annotations.
//! - [`harness`]: prequential evaluation, sweeps and reports.

pub mod classifier;
pub mod cmgmm;
pub mod em;
pub mod error;
pub mod harness;
pub mod kd3;
pub mod kde;
pub mod mixture;
pub mod streamgen;

pub use error::{Error, Result};
