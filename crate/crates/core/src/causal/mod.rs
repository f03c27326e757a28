//! Probabilities of causation for linear fingerprint indexes.
//!
//! An index `Z = φ'Y` and a threshold `u` define the event `Z > u`. Its
//! probabilities in the factual and counterfactual worlds, `p = 1 − G(u)` and
//! `p̄ = 1 − Ḡ(u)`, give PN, PS and PNS. The optimal index is the linear
//! discriminant `Σ̂⁻¹(μ̂ − μ̄̂)`; the CDFs come from Monte Carlo draws of the
//! Student-t worlds smoothed with a Gaussian kernel.

mod attribute;
mod index;
mod kde;
mod language;
mod probs;
mod sampling;
mod threshold;

use serde::Serializer;
use thiserror::Error;

use crate::lowrank::LowRankError;

pub use attribute::{
    attribute, attribute_indices, attribute_worlds, fit_worlds, AttributeOptions, CausalReport,
    FittedWorlds, IndexAttribution, WorldsAttribution, SCHEMA_VERSION,
};
pub use index::{analytic_pns_gaussian, optimal_index, split_index, IndexLabel, IndexSpec, SplitIndex};
pub use kde::{kernel_cdf, CdfEstimate, GRID_POINTS};
pub use language::{calibrate_language, Calibration, BANDS};
pub use probs::{causation_probs, CausationTriple};
pub use sampling::{sample_index, sample_indices, CHUNK, MIN_SAMPLES};
pub use threshold::{optimize_threshold, Criterion, Curves, ThresholdOptimum, ThresholdSummary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CausalError {
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("factual and counterfactual means coincide; no contrast to discriminate")]
    DegenerateContrast,
    #[error("index coefficients are all zero")]
    ZeroIndex,
    #[error("index coefficients are not finite")]
    NonFiniteIndex,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("samples contain non-finite values")]
    NonFiniteSample,
    #[error("samples have (numerically) zero spread, sd = {sd:e}")]
    DegenerateSample { sd: f64 },
    #[error("no threshold below the observed index {z_obs} (grid starts at {grid_min})")]
    InfeasibleThreshold { z_obs: f64, grid_min: f64 },
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// Standard Gaussian CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Writes non-finite floats as JSON `null`.
pub(crate) fn finite_or_null<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}
