//! Hierarchical observation model, variance-parameter fit, and the two worlds.
//!
//! With pattern scaling, sampling error and shrinkage uncertainty, the
//! observation is Student-t with mean `μ̂` and variance
//!
//! ```text
//! Σ̂ = (1+λ)Ĉ + σ²I + ω²x̂x̂',   λ = 1/r + ω²·Σᵢ 1/rᵢ
//! ```
//!
//! and `ν̂` degrees of freedom. The counterfactual world drops the forcing's
//! response from the model-error term and swaps the factual sampling term for
//! the counterfactual one.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::lowrank::{LowRankError, LowRankTerm, StructuredCovariance};
use crate::optim::{nelder_mead_max, NelderMeadOptions};
use crate::shrinkage::{fit_shrinkage, ShrinkageError, ShrinkagePrior};

/// Search box for both log₁₀ variance coordinates, relative to the reference
/// scales.
pub const LOG10_BOX: f64 = 6.0;
pub const STARTS: [[f64; 2]; 3] = [[-2.0, -2.0], [0.0, 0.0], [2.0, 2.0]];
const MAX_EVALS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown forcing `{0}`")]
    UnknownForcing(String),
    #[error(transparent)]
    Shrinkage(#[from] ShrinkageError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error("{world} covariance is not positive definite: {detail}")]
    NotPositiveDefinite { world: World, detail: String },
    #[error(
        "variance fit did not converge within {evals} evaluations per start; \
         best sigma2 = {sigma2:.6e}, omega2 = {omega2:.6e}, loglik = {loglik:.6}"
    )]
    OptimizerFailure {
        sigma2: f64,
        omega2: f64,
        loglik: f64,
        evals: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    Factual,
    Counterfactual,
}

impl std::fmt::Display for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            World::Factual => "factual",
            World::Counterfactual => "counterfactual",
        })
    }
}

/// Where the counterfactual mean comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CounterfactualSource {
    /// An explicit "all forcings but f" ensemble.
    Ensemble { mean: DVector<f64>, r_bar: usize },
    /// `μ̂ − x̂_f`, with the extra sampling term `Ĉ/r_f`.
    Additivity,
}

#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub y: DVector<f64>,
    pub mu_hat: DVector<f64>,
    /// Individual responses `x̂ᵢ` as columns.
    pub x_hat: DMatrix<f64>,
    pub forcings: Vec<String>,
    pub r: usize,
    pub r_i: Vec<usize>,
    pub prior: ShrinkagePrior,
    pub forcing_index: usize,
    pub counterfactual: CounterfactualSource,
}

impl ModelInputs {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x_hat.ncols()
    }

    pub fn forcing(&self) -> &str {
        &self.forcings[self.forcing_index]
    }

    pub fn r_bar(&self) -> Option<usize> {
        match &self.counterfactual {
            CounterfactualSource::Ensemble { r_bar, .. } => Some(*r_bar),
            CounterfactualSource::Additivity => None,
        }
    }

    /// `λ = 1/r + ω²·Σᵢ 1/rᵢ`.
    pub fn lambda(&self, omega2: f64) -> f64 {
        1.0 / self.r as f64 + omega2 * self.r_i.iter().map(|&r| 1.0 / r as f64).sum::<f64>()
    }

    /// Reference scales `(σ²_ref, ω²_ref)` for the search coordinates.
    pub fn reference_scales(&self) -> (f64, f64) {
        let n = self.n() as f64;
        let mean = self.y.mean();
        let var_y = self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sigma_ref = if var_y > 0.0 {
            var_y
        } else {
            self.prior.delta_hat.mean()
        };
        let xx = self.x_hat.norm_squared();
        let omega_ref = if xx > 0.0 { sigma_ref * n / xx } else { 1.0 };
        (sigma_ref, omega_ref)
    }
}

pub fn assemble_inputs(d: &Dataset, forcing: &str) -> Result<ModelInputs, ModelError> {
    let forcing_index = d
        .forcing_index(forcing)
        .ok_or_else(|| ModelError::UnknownForcing(forcing.to_string()))?;
    let p = d.p();
    let mut x_hat = DMatrix::zeros(d.n(), p);
    for (i, e) in d.individual.iter().enumerate() {
        x_hat.set_column(i, &e.mean());
    }
    let counterfactual = match d.counterfactual_for(forcing) {
        Some(e) => CounterfactualSource::Ensemble {
            mean: e.mean(),
            r_bar: e.r(),
        },
        None => CounterfactualSource::Additivity,
    };
    Ok(ModelInputs {
        y: d.y.clone(),
        mu_hat: d.factual.mean(),
        x_hat,
        forcings: d.individual.iter().map(|e| e.name().to_string()).collect(),
        r: d.factual.r(),
        r_i: d.individual.iter().map(|e| e.r()).collect(),
        prior: fit_shrinkage(&d.control)?,
        forcing_index,
        counterfactual,
    })
}

/// `Σ̂` for the given variance parameters.
pub fn factual_covariance(
    m: &ModelInputs,
    sigma2: f64,
    omega2: f64,
) -> Result<StructuredCovariance, LowRankError> {
    let c = 1.0 + m.lambda(omega2);
    world_covariance(m, c, sigma2, omega2, m.x_hat.clone())
}

/// `Σ̄̂ = Σ̂ − ω²x̂_f x̂_f' + (1/r̄ − 1/r)Ĉ`, or `+ Ĉ/r_f` instead of the
/// last term under additivity. Stored as `c̄Ĉ + σ²I + ω²x̂₋f x̂₋f'`.
pub fn counterfactual_covariance(
    m: &ModelInputs,
    sigma2: f64,
    omega2: f64,
) -> Result<StructuredCovariance, ModelError> {
    let f = m.forcing_index;
    let extra = match &m.counterfactual {
        CounterfactualSource::Ensemble { r_bar, .. } => 1.0 / *r_bar as f64 - 1.0 / m.r as f64,
        CounterfactualSource::Additivity => 1.0 / m.r_i[f] as f64,
    };
    let c = 1.0 + m.lambda(omega2) + extra;
    if !(c > 0.0) {
        return Err(ModelError::NotPositiveDefinite {
            world: World::Counterfactual,
            detail: format!("coefficient of the internal-variability term is {c}"),
        });
    }
    let others = m.x_hat.clone().remove_column(f);
    Ok(world_covariance(m, c, sigma2, omega2, others)?)
}

fn world_covariance(
    m: &ModelInputs,
    c: f64,
    sigma2: f64,
    omega2: f64,
    responses: DMatrix<f64>,
) -> Result<StructuredCovariance, LowRankError> {
    let diag = m.prior.target_diag(c).add_scalar(sigma2);
    StructuredCovariance::new(
        diag,
        vec![
            m.prior.control_term(c),
            LowRankTerm::new("response", responses, omega2),
        ],
    )
}

/// Student-t log-likelihood kernel:
/// `−½·log|Σ̂| − ½(ν̂+n)·log(1 + (y−μ̂)'Σ̂⁻¹(y−μ̂)/(ν̂−2))`.
/// Returns `−∞` where `Σ̂` cannot be factored.
pub fn log_likelihood(sigma: f64, omega: f64, m: &ModelInputs) -> f64 {
    log_likelihood_var(sigma * sigma, omega * omega, m)
}

fn log_likelihood_var(sigma2: f64, omega2: f64, m: &ModelInputs) -> f64 {
    let Ok(cov) = factual_covariance(m, sigma2, omega2) else {
        return f64::NEG_INFINITY;
    };
    let resid = &m.y - &m.mu_hat;
    let Ok(q) = cov.quad_form(&resid) else {
        return f64::NEG_INFINITY;
    };
    let nu = m.prior.nu_hat;
    let n = m.n() as f64;
    -0.5 * cov.log_det() - 0.5 * (nu + n) * (q / (nu - 2.0)).ln_1p()
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceParams {
    pub sigma: f64,
    pub omega: f64,
    pub lambda: f64,
    pub loglik: f64,
    /// Index into [`STARTS`] of the start that produced the optimum.
    pub start: usize,
    pub evaluations: usize,
}

impl VarianceParams {
    pub fn sigma2(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn omega2(&self) -> f64 {
        self.omega * self.omega
    }
}

/// Maps search coordinates to `(σ², ω²)`.
pub fn variances_from_theta(m: &ModelInputs, theta: &[f64]) -> (f64, f64) {
    let (s_ref, o_ref) = m.reference_scales();
    (s_ref * 10f64.powf(theta[0]), o_ref * 10f64.powf(theta[1]))
}

/// Maximizes the likelihood over `θ = (log₁₀ σ²/σ²_ref, log₁₀ ω²/ω²_ref)` in
/// `[−6, 6]²` with Nelder–Mead from each of [`STARTS`].
pub fn fit_variance_params(m: &ModelInputs) -> Result<VarianceParams, ModelError> {
    let opts = NelderMeadOptions {
        initial_step: 1.0,
        f_rel_tol: 1e-10,
        x_tol: 1e-6,
        max_evals: MAX_EVALS,
        lower: vec![-LOG10_BOX; 2],
        upper: vec![LOG10_BOX; 2],
    };
    let objective = |theta: &[f64]| {
        let (s2, o2) = variances_from_theta(m, theta);
        log_likelihood_var(s2, o2, m)
    };
    let runs: Vec<_> = STARTS
        .par_iter()
        .map(|x0| nelder_mead_max(objective, x0, &opts))
        .collect();
    // Highest likelihood wins; ties go to the earlier start.
    let best = (0..runs.len())
        .fold(0, |b, i| if runs[i].value > runs[b].value { i } else { b });
    let run = &runs[best];
    let (sigma2, omega2) = variances_from_theta(m, &run.x);
    let evaluations = runs.iter().map(|r| r.evals).sum();
    if !runs.iter().any(|r| r.converged) || !run.value.is_finite() {
        return Err(ModelError::OptimizerFailure {
            sigma2,
            omega2,
            loglik: run.value,
            evals: MAX_EVALS,
        });
    }
    log::debug!(
        "variance fit: sigma2 = {sigma2:.4e}, omega2 = {omega2:.4e}, loglik = {:.6}, start {best}",
        run.value
    );
    Ok(VarianceParams {
        sigma: sigma2.sqrt(),
        omega: omega2.sqrt(),
        lambda: m.lambda(omega2),
        loglik: run.value,
        start: best,
        evaluations,
    })
}

/// Student-t distribution parameterized by its variance matrix.
#[derive(Debug, Clone)]
pub struct WorldPdf {
    pub mean: DVector<f64>,
    pub cov: StructuredCovariance,
    pub nu: f64,
    pub label: World,
}

impl WorldPdf {
    pub fn n(&self) -> usize {
        self.mean.len()
    }

    /// Full log-density including the normalizing constant.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64, LowRankError> {
        let n = self.n() as f64;
        let nu = self.nu;
        let q = self.cov.quad_form(&(y - &self.mean))?;
        let constant = ln_gamma((nu + n) / 2.0)
            - ln_gamma(nu / 2.0)
            - n / 2.0 * ((nu - 2.0) * std::f64::consts::PI).ln();
        Ok(constant - 0.5 * self.cov.log_det() - 0.5 * (nu + n) * (q / (nu - 2.0)).ln_1p())
    }

    /// Same world with its variance multiplied by `k`.
    pub fn inflated(&self, k: f64) -> Result<Self, LowRankError> {
        Ok(Self {
            mean: self.mean.clone(),
            cov: self.cov.scaled(k)?,
            nu: self.nu,
            label: self.label,
        })
    }
}

pub fn factual_pdf(m: &ModelInputs, v: &VarianceParams) -> Result<WorldPdf, ModelError> {
    let cov = factual_covariance(m, v.sigma2(), v.omega2()).map_err(|e| {
        ModelError::NotPositiveDefinite {
            world: World::Factual,
            detail: e.to_string(),
        }
    })?;
    Ok(WorldPdf {
        mean: m.mu_hat.clone(),
        cov,
        nu: m.prior.nu_hat,
        label: World::Factual,
    })
}

pub fn counterfactual_pdf(m: &ModelInputs, v: &VarianceParams) -> Result<WorldPdf, ModelError> {
    let mean = match &m.counterfactual {
        CounterfactualSource::Ensemble { mean, .. } => mean.clone(),
        CounterfactualSource::Additivity => &m.mu_hat - m.x_hat.column(m.forcing_index),
    };
    let cov = counterfactual_covariance(m, v.sigma2(), v.omega2()).map_err(|e| match e {
        ModelError::LowRank(e) => ModelError::NotPositiveDefinite {
            world: World::Counterfactual,
            detail: e.to_string(),
        },
        other => other,
    })?;
    Ok(WorldPdf {
        mean,
        cov,
        nu: m.prior.nu_hat,
        label: World::Counterfactual,
    })
}

/// Trace shares of the factual covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UncertaintyShares {
    /// `tr Ĉ / T`
    pub internal_variability: f64,
    /// `ω²‖x̂‖² / T`
    pub model_error: f64,
    /// `nσ² / T`
    pub observational: f64,
    /// `λ tr Ĉ / T`
    pub sampling: f64,
    /// The σ² term could equally be model error; the split is not
    /// identifiable from a single observation.
    pub observational_split_identifiable: bool,
}

impl UncertaintyShares {
    pub fn total(&self) -> f64 {
        self.internal_variability + self.model_error + self.observational + self.sampling
    }
}

pub fn uncertainty_decomposition(m: &ModelInputs, v: &VarianceParams) -> UncertaintyShares {
    let tr_c = m.prior.c_hat.trace();
    let parts = [
        tr_c,
        v.omega2() * m.x_hat.norm_squared(),
        m.n() as f64 * v.sigma2(),
        v.lambda * tr_c,
    ];
    let total: f64 = parts.iter().sum();
    UncertaintyShares {
        internal_variability: parts[0] / total,
        model_error: parts[1] / total,
        observational: parts[2] / total,
        sampling: parts[3] / total,
        observational_split_identifiable: false,
    }
}

/// Diagnostic dump of a fitted model.
#[derive(Debug, Clone, Serialize)]
pub struct FittedModel {
    pub forcing: String,
    pub forcings: Vec<String>,
    pub n: usize,
    pub mu_hat: Vec<f64>,
    pub x_hat: Vec<Vec<f64>>,
    pub counterfactual_mean: Vec<f64>,
    pub counterfactual_source: &'static str,
    pub sigma: f64,
    pub omega: f64,
    pub sigma2: f64,
    pub omega2: f64,
    pub lambda: f64,
    pub loglik: f64,
    pub a_hat: f64,
    pub nu_hat: f64,
    pub shrinkage_grid_fallback: bool,
    pub r: usize,
    pub r_bar: Option<usize>,
    pub r_i: Vec<usize>,
    pub r0: usize,
}

impl FittedModel {
    pub fn new(m: &ModelInputs, v: &VarianceParams, counterfactual: &WorldPdf) -> Self {
        Self {
            forcing: m.forcing().to_string(),
            forcings: m.forcings.clone(),
            n: m.n(),
            mu_hat: m.mu_hat.iter().copied().collect(),
            x_hat: m
                .x_hat
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            counterfactual_mean: counterfactual.mean.iter().copied().collect(),
            counterfactual_source: match m.counterfactual {
                CounterfactualSource::Ensemble { .. } => "ensemble",
                CounterfactualSource::Additivity => "additivity",
            },
            sigma: v.sigma,
            omega: v.omega,
            sigma2: v.sigma2(),
            omega2: v.omega2(),
            lambda: v.lambda,
            loglik: v.loglik,
            a_hat: m.prior.a_hat,
            nu_hat: m.prior.nu_hat,
            shrinkage_grid_fallback: m.prior.grid_fallback,
            r: m.r,
            r_bar: m.r_bar(),
            r_i: m.r_i.clone(),
            r0: m.prior.r0,
        }
    }
}
