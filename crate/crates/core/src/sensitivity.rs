//! How robust the attribution is to the uncertainty model.
//!
//! - Inflation scans multiply both world covariances by a factor and redo the
//!   attribution; correlation scans rescale off-diagonal correlations instead.
//! - The signal spectrum expands the optimal index over the eigenvectors of
//!   the factual covariance.
//! - Projected indexes restrict the optimal index to the leading modes of the
//!   internal-variability covariance, a common suboptimal practice.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::causal::{
    attribute_indices, attribute_worlds, fit_worlds, optimal_index, split_index, AttributeOptions,
    CausalError, FittedWorlds, IndexAttribution, IndexLabel, IndexSpec,
};
use crate::dataset::Dataset;
use crate::lowrank::{LowRankError, LowRankTerm, StructuredCovariance};
use crate::model::WorldPdf;
use crate::{Error, Stage};

/// Largest dimension for which covariances are materialized.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("scan factor {0} must be finite and > 0")]
    InvalidFactor(f64),
    #[error("no scan factors given")]
    NoFactors,
    #[error("correlation factor {gamma} outside [0, {max})")]
    InvalidGamma { gamma: f64, max: f64 },
    #[error("k = {k} outside 1..={n}")]
    InvalidRank { k: usize, n: usize },
    #[error("dimension {n} exceeds the dense limit {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("eigen-decomposition failed: {0}")]
    Eigen(String),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Causal(#[from] CausalError),
}

impl SensitivityError {
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::InvalidFactor(_)
                | Self::NoFactors
                | Self::InvalidGamma { .. }
                | Self::InvalidRank { .. }
                | Self::TooLarge { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// Covariances multiplied by the factor.
    Inflation,
    /// Off-diagonal correlations multiplied by the factor.
    Correlation,
}

impl std::str::FromStr for ScanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "inflation" => Ok(Self::Inflation),
            "correlation" => Ok(Self::Correlation),
            other => Err(format!("unknown scan mode `{other}` (expected inflation or correlation)")),
        }
    }
}

/// PNS along the total, global-mean and pattern indexes for each factor,
/// sorted by factor. Sub-index entries are `None` when that part of the
/// optimal index vanishes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InflationScan {
    pub mode: ScanMode,
    pub factors: Vec<f64>,
    pub pns_total: Vec<f64>,
    pub pns_global: Vec<Option<f64>>,
    pub pns_pattern: Vec<Option<f64>>,
}

impl InflationScan {
    /// First factor at which the total PNS falls below `level`, linearly
    /// interpolated between scan points.
    pub fn crossing(&self, level: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self.factors.iter().copied().zip(self.pns_total.iter().copied()).collect();
        if pts.first()?.1 < level {
            return Some(pts[0].0);
        }
        pts.windows(2).find_map(|w| {
            let ((k0, p0), (k1, p1)) = (w[0], w[1]);
            (p0 >= level && p1 < level).then(|| k0 + (p0 - level) / (p0 - p1) * (k1 - k0))
        })
    }
}

fn normalize_factors(factors: &[f64], mode: ScanMode) -> Result<Vec<f64>, SensitivityError> {
    if factors.is_empty() {
        return Err(SensitivityError::NoFactors);
    }
    for &k in factors {
        let ok = match mode {
            ScanMode::Inflation => k.is_finite() && k > 0.0,
            ScanMode::Correlation => k.is_finite() && k >= 0.0,
        };
        if !ok {
            return Err(SensitivityError::InvalidFactor(k));
        }
    }
    let mut out = factors.to_vec();
    if !out.contains(&1.0) {
        out.push(1.0);
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Diagonal-plus-low-rank form of a dense symmetric PD matrix:
/// `cI + V(Λ − c)V'` with `c` half the smallest eigenvalue.
pub fn structured_from_dense(m: &DMatrix<f64>) -> Result<StructuredCovariance, SensitivityError> {
    let n = m.nrows();
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let lo = eig.eigenvalues.min();
    if !(lo > 0.0) || eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(SensitivityError::Eigen(format!("matrix is not positive definite (min eigenvalue {lo:e})")));
    }
    let c = 0.5 * lo;
    let mut u = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        u.column_mut(j).scale_mut((lam - c).sqrt());
    }
    Ok(StructuredCovariance::new(
        DVector::from_element(n, c),
        vec![LowRankTerm::new("dense", u, 1.0)],
    )?)
}

fn check_dense(n: usize) -> Result<(), SensitivityError> {
    if n > DENSE_LIMIT {
        return Err(SensitivityError::TooLarge { n, limit: DENSE_LIMIT });
    }
    Ok(())
}

/// Largest admissible correlation factor, `1/max|corr|` over off-diagonal
/// entries (infinite for a diagonal matrix).
pub fn max_correlation_factor(cov: &StructuredCovariance) -> Result<f64, SensitivityError> {
    check_dense(cov.n())?;
    let m = cov.materialize()?;
    let sd = m.diagonal().map(f64::sqrt);
    let mut top: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..j {
            top = top.max((m[(i, j)] / (sd[i] * sd[j])).abs());
        }
    }
    Ok(if top > 0.0 { 1.0 / top } else { f64::INFINITY })
}

/// `D^½ (I + γ(R − I)) D^½`, projected back to PD by flooring eigenvalues at
/// `1e-10·tr/n`.
pub fn rescale_correlations(
    cov: &StructuredCovariance,
    gamma: f64,
) -> Result<StructuredCovariance, SensitivityError> {
    let max = max_correlation_factor(cov)?;
    if !(gamma >= 0.0 && gamma < max) {
        return Err(SensitivityError::InvalidGamma { gamma, max });
    }
    let m = cov.materialize()?;
    let n = m.nrows();
    let mut s = m.clone();
    for j in 0..n {
        for i in 0..n {
            if i != j {
                s[(i, j)] *= gamma;
            }
        }
    }
    let floor = 1e-10 * m.trace() / n as f64;
    let eig = SymmetricEigen::new((&s + s.transpose()) * 0.5);
    let lam = eig.eigenvalues.map(|v| v.max(floor));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
    structured_from_dense(&fixed)
}

fn transformed(w: &WorldPdf, mode: ScanMode, k: f64) -> Result<WorldPdf, SensitivityError> {
    match mode {
        ScanMode::Inflation => Ok(w.inflated(k)?),
        ScanMode::Correlation if k == 1.0 => Ok(w.clone()),
        ScanMode::Correlation => Ok(WorldPdf {
            mean: w.mean.clone(),
            cov: rescale_correlations(&w.cov, k)?,
            nu: w.nu,
            label: w.label,
        }),
    }
}

/// Scans already-fitted worlds. The optimal index is re-derived per factor;
/// every factor uses the same seed.
pub fn scan_worlds(
    factual: &WorldPdf,
    counterfactual: &WorldPdf,
    y: &DVector<f64>,
    factors: &[f64],
    mode: ScanMode,
    opts: &AttributeOptions,
) -> Result<InflationScan, Error> {
    let factors = normalize_factors(factors, mode)?;
    let rows: Vec<(f64, Option<f64>, Option<f64>)> = factors
        .par_iter()
        .map(|&k| {
            let f = transformed(factual, mode, k).map_err(|e| Error::at(Stage::Scan)(e.into()))?;
            let c = transformed(counterfactual, mode, k).map_err(|e| Error::at(Stage::Scan)(e.into()))?;
            let a = attribute_worlds(&f, &c, y, opts)?;
            Ok((
                a.total.threshold.pns,
                a.global.map(|g| g.threshold.pns),
                a.pattern.map(|p| p.threshold.pns),
            ))
        })
        .collect::<Result<_, Error>>()?;
    Ok(InflationScan {
        mode,
        factors,
        pns_total: rows.iter().map(|r| r.0).collect(),
        pns_global: rows.iter().map(|r| r.1).collect(),
        pns_pattern: rows.iter().map(|r| r.2).collect(),
    })
}

/// Fits the model once and scans both covariances by each factor.
pub fn inflation_scan(
    d: &Dataset,
    forcing: &str,
    factors: &[f64],
    opts: &AttributeOptions,
) -> Result<InflationScan, Error> {
    scan_mode(d, forcing, factors, ScanMode::Inflation, opts)
}

pub fn scan_mode(
    d: &Dataset,
    forcing: &str,
    factors: &[f64],
    mode: ScanMode,
    opts: &AttributeOptions,
) -> Result<InflationScan, Error> {
    normalize_factors(factors, mode)?;
    let w = fit_worlds(d, forcing)?;
    scan_worlds(&w.factual, &w.counterfactual, &d.y, factors, mode, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumRow {
    pub rank: usize,
    pub eigenvalue: f64,
    /// `⟨v, μ − μ̄⟩`.
    pub projection: f64,
    /// `⟨v, μ − μ̄⟩ / λ`, the weight of `v` in the optimal index.
    pub coefficient: f64,
    /// `⟨v, μ − μ̄⟩² / λ`, this mode's share of the squared Mahalanobis
    /// separation.
    pub signal_to_noise: f64,
}

/// Eigen-expansion of the optimal index, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SignalSpectrum {
    pub rows: Vec<SpectrumRow>,
    /// Eigenvectors as columns, in row order.
    pub eigenvectors: DMatrix<f64>,
}

impl SignalSpectrum {
    /// `Σₖ coefficientₖ·vₖ`.
    pub fn reconstruct(&self) -> DVector<f64> {
        let c = DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.coefficient));
        &self.eigenvectors * c
    }
}

/// Eigenpairs of a dense symmetric matrix sorted by eigenvalue descending,
/// each vector signed so its largest-magnitude entry is positive.
fn sorted_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), SensitivityError> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|v| !v.is_finite()) {
        return Err(SensitivityError::Eigen("non-finite eigenpairs".into()));
    }
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let n = m.nrows();
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let s = if v[v.iamax()] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(c, &(v * s));
    }
    Ok((values, vectors))
}

pub fn eigen_signal_spectrum(
    factual: &WorldPdf,
    counterfactual: &WorldPdf,
) -> Result<SignalSpectrum, SensitivityError> {
    check_dense(factual.n())?;
    let (values, vectors) = sorted_eigen(&factual.cov.materialize()?)?;
    if values.iter().any(|&l| l <= 0.0) {
        return Err(SensitivityError::Eigen(format!(
            "covariance is not positive definite (min eigenvalue {:e})",
            values.min()
        )));
    }
    let d = &factual.mean - &counterfactual.mean;
    let rows = values
        .iter()
        .enumerate()
        .map(|(k, &lam)| {
            let proj = vectors.column(k).dot(&d);
            SpectrumRow {
                rank: k + 1,
                eigenvalue: lam,
                projection: proj,
                coefficient: proj / lam,
                signal_to_noise: proj * proj / lam,
            }
        })
        .collect();
    Ok(SignalSpectrum {
        rows,
        eigenvectors: vectors,
    })
}

/// `φ⁺ = Pφ*` with `P` the orthogonal projector on the `k` leading
/// eigenvectors of the internal-variability covariance.
pub fn projected_index(
    control_cov: &StructuredCovariance,
    k: usize,
    phi_star: &IndexSpec,
) -> Result<IndexSpec, SensitivityError> {
    let n = control_cov.n();
    if k == 0 || k > n {
        return Err(SensitivityError::InvalidRank { k, n });
    }
    if phi_star.n() != n {
        return Err(CausalError::Dimension {
            expected: n,
            got: phi_star.n(),
        }
        .into());
    }
    if k == n {
        return Ok(IndexSpec::new(phi_star.phi().clone(), IndexLabel::Projected)?);
    }
    check_dense(n)?;
    let (_, vectors) = sorted_eigen(&control_cov.materialize()?)?;
    let lead = vectors.columns(0, k);
    let phi = &lead * (lead.transpose() * phi_star.phi());
    Ok(IndexSpec::new(phi, IndexLabel::Projected)?)
}

/// Optimal and projected indexes attributed on the same draws.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionComparison {
    pub k: usize,
    pub optimal: IndexAttribution,
    pub optimal_pattern: Option<IndexAttribution>,
    pub projected: IndexAttribution,
    /// Pattern part of the projected index.
    pub projected_pattern: Option<IndexAttribution>,
}

pub fn compare_projection(
    factual: &WorldPdf,
    counterfactual: &WorldPdf,
    control_cov: &StructuredCovariance,
    k: usize,
    y: &DVector<f64>,
    opts: &AttributeOptions,
) -> Result<ProjectionComparison, Error> {
    let phi = optimal_index(factual, counterfactual).map_err(|e| Error::at(Stage::Index)(e.into()))?;
    let plus = projected_index(control_cov, k, &phi).map_err(|e| Error::at(Stage::Spectrum)(e.into()))?;
    let opt_pattern = split_index(&phi).residual;
    let plus_pattern = split_index(&plus).residual.map(|mut s| {
        s.label = IndexLabel::Projected;
        s
    });
    let mut indices = vec![&phi, &plus];
    indices.extend(opt_pattern.as_ref());
    indices.extend(plus_pattern.as_ref());
    let mut res = attribute_indices(factual, counterfactual, y, &indices, opts)?.into_iter();
    let optimal = res.next().expect("optimal result");
    let projected = res.next().expect("projected result");
    let optimal_pattern = opt_pattern.as_ref().and_then(|_| res.next());
    let projected_pattern = plus_pattern.as_ref().and_then(|_| res.next());
    Ok(ProjectionComparison {
        k,
        optimal,
        optimal_pattern,
        projected,
        projected_pattern,
    })
}

/// [`compare_projection`] for a fitted model, projecting on the shrunk
/// control covariance.
pub fn compare_projection_fitted(
    w: &FittedWorlds,
    k: usize,
    y: &DVector<f64>,
    opts: &AttributeOptions,
) -> Result<ProjectionComparison, Error> {
    compare_projection(&w.factual, &w.counterfactual, &w.inputs.prior.c_hat, k, y, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::analytic_pns_gaussian;
    use crate::model::World;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cov(n: usize, rng: &mut ChaCha8Rng) -> StructuredCovariance {
        let d = DVector::from_fn(n, |_, _| rng.random_range(0.3..1.5));
        let u = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        StructuredCovariance::new(d, vec![LowRankTerm::new("control", u, 0.7)]).unwrap()
    }

    fn pair(mu: DVector<f64>, mu_bar: DVector<f64>, cov: StructuredCovariance) -> (WorldPdf, WorldPdf) {
        let f = WorldPdf {
            mean: mu,
            cov: cov.clone(),
            nu: f64::INFINITY,
            label: World::Factual,
        };
        let c = WorldPdf {
            mean: mu_bar,
            cov,
            nu: f64::INFINITY,
            label: World::Counterfactual,
        };
        (f, c)
    }

    fn opts() -> AttributeOptions {
        AttributeOptions {
            samples: 50_000,
            ..Default::default()
        }
    }

    #[test]
    fn identity_spectrum_is_inner_products() {
        let cov = StructuredCovariance::diagonal(DVector::from_element(3, 1.0)).unwrap();
        let d = DVector::from_column_slice(&[0.5, -1.0, 2.0]);
        let (f, c) = pair(d.clone(), DVector::zeros(3), cov);
        let s = eigen_signal_spectrum(&f, &c).unwrap();
        for (k, row) in s.rows.iter().enumerate() {
            assert_eq!(row.eigenvalue, 1.0);
            let ip = s.eigenvectors.column(k).dot(&d);
            assert!((row.coefficient - ip).abs() < 1e-15);
        }
        assert!((s.reconstruct() - d).amax() < 1e-12);
    }

    #[test]
    fn spectrum_reconstructs_optimal_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [5, 20, 54] {
            let cov = random_cov(n, &mut rng);
            let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let (f, c) = pair(mu, DVector::zeros(n), cov);
            let s = eigen_signal_spectrum(&f, &c).unwrap();
            let phi = optimal_index(&f, &c).unwrap();
            let err = (s.reconstruct() - phi.phi()).amax();
            assert!(err <= 1e-8 * phi.phi().amax().max(1.0), "n={n}: {err}");
            assert!(s.rows.windows(2).all(|w| w[0].eigenvalue >= w[1].eigenvalue));
            assert!(s.rows.iter().all(|r| r.eigenvalue > 0.0));
        }
    }

    #[test]
    fn spectrum_guards_dimension() {
        let cov = StructuredCovariance::diagonal(DVector::from_element(DENSE_LIMIT + 1, 1.0)).unwrap();
        let (f, c) = pair(DVector::from_element(DENSE_LIMIT + 1, 1.0), DVector::zeros(DENSE_LIMIT + 1), cov);
        assert!(matches!(eigen_signal_spectrum(&f, &c), Err(SensitivityError::TooLarge { .. })));
    }

    #[test]
    fn full_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cov = random_cov(6, &mut rng);
        let phi = IndexSpec::new(DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)), IndexLabel::Optimal).unwrap();
        assert_eq!(projected_index(&cov, 6, &phi).unwrap().phi(), phi.phi());
        assert!(matches!(projected_index(&cov, 0, &phi), Err(SensitivityError::InvalidRank { .. })));
        assert!(matches!(projected_index(&cov, 7, &phi), Err(SensitivityError::InvalidRank { .. })));
    }

    #[test]
    fn projection_keeps_leading_subspace() {
        let d = DVector::from_column_slice(&[4.0, 3.0, 2.0, 1.0]);
        let cov = StructuredCovariance::diagonal(d).unwrap();
        let phi = IndexSpec::new(DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]), IndexLabel::Optimal).unwrap();
        let p = projected_index(&cov, 2, &phi).unwrap();
        let expect = DVector::from_column_slice(&[1.0, 2.0, 0.0, 0.0]);
        assert!((p.phi() - expect).amax() < 1e-12);
    }

    #[test]
    fn inflation_matches_gaussian_trend() {
        let n = 4;
        let cov = StructuredCovariance::diagonal(DVector::from_element(n, 1.0)).unwrap();
        let mu = DVector::from_column_slice(&[1.5, 1.0, 0.5, 0.0]);
        let (f, c) = pair(mu.clone(), DVector::zeros(n), cov.clone());
        let y = mu.clone() * 1.2;
        let scan = scan_worlds(&f, &c, &y, &[3.0, 1.5, 2.0], ScanMode::Inflation, &opts()).unwrap();
        assert_eq!(scan.factors, vec![1.0, 1.5, 2.0, 3.0]);
        for w in scan.pns_total.windows(2) {
            assert!(w[1] <= w[0] + 0.01, "{:?}", scan.pns_total);
        }
        for (k, p) in scan.factors.iter().zip(&scan.pns_total) {
            let exact = analytic_pns_gaussian(&mu, &DVector::zeros(n), &cov.scaled(*k).unwrap()).unwrap();
            assert!((p - exact).abs() < 0.02, "k={k}: {p} vs {exact}");
        }
    }

    #[test]
    fn factor_one_matches_plain_attribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cov = random_cov(5, &mut rng);
        let mu = DVector::from_fn(5, |_, _| rng.random_range(0.0..1.0));
        let (f, c) = pair(mu.clone(), DVector::zeros(5), cov);
        let scan = scan_worlds(&f, &c, &mu, &[2.0], ScanMode::Inflation, &opts()).unwrap();
        let plain = attribute_worlds(&f, &c, &mu, &opts()).unwrap();
        assert!((scan.pns_total[0] - plain.total.threshold.pns).abs() <= 0.005);
    }

    #[test]
    fn rejects_bad_factors() {
        assert!(matches!(normalize_factors(&[], ScanMode::Inflation), Err(SensitivityError::NoFactors)));
        assert!(matches!(
            normalize_factors(&[1.0, 0.0], ScanMode::Inflation),
            Err(SensitivityError::InvalidFactor(_))
        ));
        assert!(normalize_factors(&[0.0], ScanMode::Correlation).is_ok());
    }

    #[test]
    fn correlation_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_cov(5, &mut rng);
        let m = cov.materialize().unwrap();
        let same = rescale_correlations(&cov, 1.0).unwrap().materialize().unwrap();
        assert!((&same - &m).amax() < 1e-10 * m.amax());
        let diag = rescale_correlations(&cov, 0.0).unwrap().materialize().unwrap();
        assert!((diag - DMatrix::from_diagonal(&m.diagonal())).amax() < 1e-10 * m.amax());
        let max = max_correlation_factor(&cov).unwrap();
        assert!(matches!(rescale_correlations(&cov, max), Err(SensitivityError::InvalidGamma { .. })));
    }

    #[test]
    fn crossing_interpolates() {
        let scan = InflationScan {
            mode: ScanMode::Inflation,
            factors: vec![1.0, 2.0, 3.0],
            pns_total: vec![0.9999, 0.97, 0.93],
            pns_global: vec![None; 3],
            pns_pattern: vec![None; 3],
        };
        assert!((scan.crossing(0.95).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(scan.crossing(0.5), None);
        assert_eq!(scan.crossing(0.99999), Some(1.0));
    }
}
