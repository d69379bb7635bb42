//! Identifying irregular object images from detection score distributions.
//!
//! The pipeline trains a weakly supervised region-level detector from
//! image-level labels, then fits two Gaussian-process generative models per
//! class — one over regular training images, one over other-class images —
//! on the spatial distribution of the region detection scores. A test image
//! is ranked as irregular when its scores fit neither model well.
//!
//! Modules follow the pipeline stages:
//!
//! * [`dataset`] — domain types and JSON-lines/CSV ingestion
//! * [`geometry`] — box arithmetic and the proposal spatial representation
//! * [`detector`] — max-pooled multiple-instance detector training/scoring
//! * [`gp`] — kernel assembly, marginal/conditional likelihoods, fitting
//! * [`baselines`] — the comparison scoring rules
//! * [`eval`] — average precision, ROC/AUC, per-class reports
//! * [`synth`] — seeded synthetic benchmark generator
//! * [`pipeline`] — file-to-file stage orchestration shared with the CLI

pub mod baselines;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gp;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
