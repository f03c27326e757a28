use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::finite_or_null;

/// Calibrated likelihood term and the matching Gaussian sigma level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub term: &'static str,
    /// `F⁻¹(p)` for the standard Gaussian `F`; infinite at 0 and 1.
    #[serde(serialize_with = "finite_or_null")]
    pub sigma_level: f64,
}

pub const BANDS: [(&str, &str); 8] = [
    ("virtually certain", ">= 0.99"),
    ("extremely likely", ">= 0.95"),
    ("very likely", ">= 0.90"),
    ("likely", ">= 0.66"),
    ("about as likely as not", "> 0.33 and < 0.66"),
    ("unlikely", "<= 0.33"),
    ("very unlikely", "<= 0.10"),
    ("exceptionally unlikely", "<= 0.01"),
];

pub fn calibrate_language(p: f64) -> Calibration {
    let term = if p >= 0.99 {
        BANDS[0].0
    } else if p >= 0.95 {
        BANDS[1].0
    } else if p >= 0.90 {
        BANDS[2].0
    } else if p >= 0.66 {
        BANDS[3].0
    } else if p > 0.33 {
        BANDS[4].0
    } else if p > 0.10 {
        BANDS[5].0
    } else if p > 0.01 {
        BANDS[6].0
    } else {
        BANDS[7].0
    };
    let std = Normal::standard();
    Calibration {
        term,
        sigma_level: std.inverse_cdf(p.clamp(0.0, 1.0)),
    }
}
