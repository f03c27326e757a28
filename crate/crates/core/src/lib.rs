//! Probabilities of causation for an observed change.
//!
//! The crate fits a hierarchical Student-t model to factual and counterfactual
//! model ensembles, builds the linear discriminant ("optimal fingerprint")
//! index separating the two worlds, and reports the probabilities of
//! necessary (PN), sufficient (PS), and necessary-and-sufficient (PNS)
//! causation at the threshold maximizing the chosen criterion.
//!
//! Pipeline, bottom-up:
//!
//! - [`dataset`]: ensembles, manifest/CSV ingestion, anomalies.
//! - [`lowrank`]: diagonal-plus-low-rank covariance algebra (Woodbury/Sylvester).
//! - [`shrinkage`]: empirical-Bayes shrinkage of the control-run covariance.
//! - [`model`]: variance-parameter MLE and the factual/counterfactual worlds.
//! - [`causal`]: index construction, Monte Carlo CDFs, threshold search, reports.
//! - [`sensitivity`]: inflation scans and eigen-projection comparisons.
//! - [`synth`]: synthetic datasets from a known generative model.

pub mod causal;
pub mod dataset;
mod error;
pub mod lowrank;
pub mod model;
pub mod optim;
pub mod output;
pub mod sensitivity;
pub mod shrinkage;
pub mod synth;

pub use error::{Error, Result, Stage};
