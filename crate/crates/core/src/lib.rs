//! Signal-to-decision pipeline for multichannel microelectrode-array (MEA)
//! recordings.
//!
//! The crate covers the whole path from raw voltage traces to a three-class
//! (Control / DENV2 / ZIKV) decision:
//!
//! * [`signal`]: 2nd-order Butterworth high-pass design, causal filtering and
//!   windowed-σ threshold spike detection.
//! * [`synth`]: synthetic recordings and labeled feature tables.
//! * [`dataset`]: the feature-table model, its CSV format and stratified folds.
//! * [`preprocess`]: robust scaling, variance importance and PCA.
//! * [`nn`]: a from-scratch 1-D CNN with seven optimizers.
//! * [`gbt`]: exact-greedy second-order gradient boosting (softmax objective).
//! * [`baselines`]: the comparison methods behind one interface.
//! * [`eval`]: metrics, PR curves, cross-validation and report assembly.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! All reductions are ordered, so both paths produce bit-identical results.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gbt;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod rng;
pub mod signal;
pub mod synth;

pub use dataset::{ClassLabel, Dpi, FeatureTable, FoldPlan};
pub use error::{Error, Result};
