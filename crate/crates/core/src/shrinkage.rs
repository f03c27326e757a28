//! Empirical-Bayes shrinkage of the control-run covariance.
//!
//! The estimate is `Ĉ = âΔ̂ + (1−â)Ω̂` with `Ω̂ = X₀X₀'/r₀` built from the
//! centered control runs and `Δ̂ = diag(Ω̂)`. The intensity `â` maximizes the
//! inverse-Wishart marginal likelihood `ℓ(a, Δ̂)`.
//!
//! Centering spends one degree of freedom, so the likelihood is evaluated with
//! the effective count `r₀ − 1`. With the raw count the centered likelihood is
//! unbounded as `a → 0` whenever `r₀² < n + 1`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::dataset::Ensemble;
use crate::lowrank::{compress_factor, LowRankError, LowRankTerm, StructuredCovariance};
use crate::optim::golden_section_max;

pub const A_MIN: f64 = 1e-6;
pub const A_MAX: f64 = 1.0 - 1e-6;
const GRID_POINTS: usize = 64;
const A_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShrinkageError {
    #[error("control ensemble needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("control runs have zero variance at cell {row}")]
    DegenerateVariance { row: usize },
    #[error("shrinkage intensity {0} outside (0, 1)")]
    IntensityOutOfRange(f64),
    #[error("target diagonal has length {got}, expected {n}")]
    TargetDimension { got: usize, n: usize },
    #[error("multivariate gamma: argument {x} must exceed (n-1)/2 = {bound}")]
    GammaDomain { x: f64, bound: f64 },
    #[error("marginal likelihood is not finite at a = {0}")]
    NonFinite(f64),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// Fitted shrinkage covariance.
#[derive(Debug, Clone)]
pub struct ShrinkagePrior {
    pub a_hat: f64,
    pub delta_hat: DVector<f64>,
    /// Factor `F` with `Ω̂ = FF'`: the centered control runs divided by `√r₀`,
    /// reduced to `n` columns when `r₀ > n`.
    pub omega_factor: DMatrix<f64>,
    pub c_hat: StructuredCovariance,
    pub nu_hat: f64,
    pub r0: usize,
    /// Set when golden-section refinement did not beat the grid scan and the
    /// grid maximum was kept.
    pub grid_fallback: bool,
}

impl ShrinkagePrior {
    pub fn n(&self) -> usize {
        self.delta_hat.len()
    }

    /// The `(1−â)Ω̂` term as a low-rank term scaled by `scale`.
    pub fn control_term(&self, scale: f64) -> LowRankTerm {
        LowRankTerm::new("control", self.omega_factor.clone(), scale * (1.0 - self.a_hat))
    }

    /// Diagonal part of `scale · Ĉ`.
    pub fn target_diag(&self, scale: f64) -> DVector<f64> {
        &self.delta_hat * (scale * self.a_hat)
    }
}

/// Centered factor `X₀/√r₀` and `diag(Ω̂)`.
pub fn empirical_covariance(
    control: &Ensemble,
) -> Result<(DMatrix<f64>, DVector<f64>), ShrinkageError> {
    let runs = control.runs();
    let r0 = runs.ncols();
    if r0 < 2 {
        return Err(ShrinkageError::TooFewRuns(r0));
    }
    let mean = runs.column_mean();
    let mut factor = runs.clone();
    for mut col in factor.column_iter_mut() {
        col -= &mean;
    }
    factor /= (r0 as f64).sqrt();
    let diag = DVector::from_iterator(factor.nrows(), factor.row_iter().map(|r| r.norm_squared()));
    for (row, &d) in diag.iter().enumerate() {
        let scale = runs.row(row).amax();
        if d <= (1e-12 * scale).powi(2) {
            return Err(ShrinkageError::DegenerateVariance { row });
        }
    }
    Ok((factor, diag))
}

/// `log Γₙ(x)`.
pub fn log_mv_gamma(n: usize, x: f64) -> Result<f64, ShrinkageError> {
    let bound = (n as f64 - 1.0) / 2.0;
    if !(x > bound) {
        return Err(ShrinkageError::GammaDomain { x, bound });
    }
    let nf = n as f64;
    let mut s = nf * (nf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=n {
        s += ln_gamma(x + (1.0 - j as f64) / 2.0);
    }
    Ok(s)
}

/// `ℓ(a, Δ)` for the given control ensemble.
pub fn marginal_log_likelihood(
    a: f64,
    delta: &DVector<f64>,
    control: &Ensemble,
) -> Result<f64, ShrinkageError> {
    let (factor, _) = empirical_covariance(control)?;
    if delta.len() != factor.nrows() {
        return Err(ShrinkageError::TargetDimension {
            got: delta.len(),
            n: factor.nrows(),
        });
    }
    ell(a, delta, &compress_factor(&factor), control.r() - 1)
}

/// `ℓ(a, Δ)` given `Ω̂ = FF'` and the degrees-of-freedom count `m`:
///
/// ```text
/// (am/(1−a)+n+1)·log|tΔ| − (m/(1−a)+n+1)·log|Ω̂+tΔ|
///   + 2·(log Γₙ(½(m/(1−a)+n+1)) − log Γₙ(½(am/(1−a)+n+1))),   t = a/(1−a)
/// ```
pub(crate) fn ell(
    a: f64,
    delta: &DVector<f64>,
    factor: &DMatrix<f64>,
    m: usize,
) -> Result<f64, ShrinkageError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(ShrinkageError::IntensityOutOfRange(a));
    }
    let n = delta.len() as f64;
    let m = m as f64;
    let t = a / (1.0 - a);
    let big = m / (1.0 - a) + n + 1.0;
    let small = a * m / (1.0 - a) + n + 1.0;
    let log_det_target = n * t.ln() + delta.iter().map(|d| d.ln()).sum::<f64>();
    let mixed = StructuredCovariance::new(
        delta * t,
        vec![LowRankTerm::new("control", factor.clone(), 1.0)],
    )?;
    let n = delta.len();
    let v = small * log_det_target - big * mixed.log_det()
        + 2.0 * (log_mv_gamma(n, big / 2.0)? - log_mv_gamma(n, small / 2.0)?);
    Ok(v)
}

/// Fits `â` by a grid scan over `[A_MIN, A_MAX]` refined by golden-section
/// search, then sets `ν̂ = 2 + r₀/(1−â)`.
pub fn fit_shrinkage(control: &Ensemble) -> Result<ShrinkagePrior, ShrinkageError> {
    let (factor, delta) = empirical_covariance(control)?;
    let factor = compress_factor(&factor);
    let r0 = control.r();
    let m = r0 - 1;

    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| A_MIN + (A_MAX - A_MIN) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let values = grid
        .par_iter()
        .map(|&a| ell(a, &delta, &factor, m))
        .collect::<Result<Vec<f64>, _>>()?;
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(ShrinkageError::NonFinite(grid[i]));
    }
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > values[b] { i } else { b });

    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID_POINTS - 1)];
    let objective = |a: f64| ell(a, &delta, &factor, m).unwrap_or(f64::NEG_INFINITY);
    let (a_gs, v_gs) = golden_section_max(objective, lo, hi, A_TOL);
    let (a_hat, grid_fallback) = if v_gs >= values[best] {
        (a_gs, false)
    } else {
        log::warn!(
            "shrinkage: golden-section refinement did not improve on grid point a = {}",
            grid[best]
        );
        (grid[best], true)
    };

    let c_hat = StructuredCovariance::new(
        &delta * a_hat,
        vec![LowRankTerm::new("control", factor.clone(), 1.0 - a_hat)],
    )?;
    Ok(ShrinkagePrior {
        a_hat,
        nu_hat: 2.0 + r0 as f64 / (1.0 - a_hat),
        delta_hat: delta,
        omega_factor: factor,
        c_hat,
        r0,
        grid_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    extern "C" {
        fn lgamma(x: f64) -> f64;
    }

    /// Platform libm log-gamma, independent of statrs.
    fn lgamma_ref(x: f64) -> f64 {
        // SAFETY: lgamma is a pure libm function of one double.
        unsafe { lgamma(x) }
    }

    fn gaussian_runs(chol: &DMatrix<f64>, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let n = chol.nrows();
        let z = DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(rng));
        chol * z
    }

    fn ensemble(runs: DMatrix<f64>) -> Ensemble {
        Ensemble::new("control", runs).unwrap()
    }

    /// Dense transcription of ℓ with Ω̂ materialized.
    fn dense_ell(a: f64, delta: &DVector<f64>, runs: &DMatrix<f64>) -> f64 {
        let n = runs.nrows();
        let r0 = runs.ncols();
        let mut x = runs.clone();
        let mean = runs.column_mean();
        for mut c in x.column_iter_mut() {
            c -= &mean;
        }
        let omega = &x * x.transpose() / r0 as f64;
        let m = (r0 - 1) as f64;
        let nf = n as f64;
        let t = a / (1.0 - a);
        let d = DMatrix::from_diagonal(delta) * t;
        let ld = |mat: DMatrix<f64>| mat.lu().determinant().ln();
        let mvg = |x: f64| {
            nf * (nf - 1.0) / 4.0 * std::f64::consts::PI.ln()
                + (1..=n).map(|j| lgamma_ref(x + (1.0 - j as f64) / 2.0)).sum::<f64>()
        };
        let big = m / (1.0 - a) + nf + 1.0;
        let small = a * m / (1.0 - a) + nf + 1.0;
        small * ld(d.clone()) - big * ld(omega + d) + 2.0 * (mvg(big / 2.0) - mvg(small / 2.0))
    }

    #[test]
    fn mirrored_pair_covariance() {
        let v = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let runs = DMatrix::from_columns(&[v.clone(), -v.clone()]);
        let (f, d) = empirical_covariance(&ensemble(runs)).unwrap();
        let omega = &f * f.transpose();
        assert!((omega - &v * v.transpose()).amax() < 1e-15);
        for i in 0..3 {
            assert!((d[i] - v[i] * v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn copies_are_degenerate() {
        let v = DVector::from_column_slice(&[0.1, 0.7, 3.3]);
        let runs = DMatrix::from_columns(&[v.clone(), v.clone(), v.clone(), v]);
        assert!(matches!(
            empirical_covariance(&ensemble(runs)),
            Err(ShrinkageError::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn diagonal_matches_row_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let runs = DMatrix::from_fn(4, 6, |_, _| StandardNormal.sample(&mut rng));
        let (_, d) = empirical_covariance(&ensemble(runs.clone())).unwrap();
        for i in 0..4 {
            let row: Vec<f64> = runs.row(i).iter().copied().collect();
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
            assert!((d[i] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn single_run_rejected() {
        let runs = DMatrix::from_element(3, 1, 1.0);
        assert_eq!(
            empirical_covariance(&ensemble(runs)).unwrap_err(),
            ShrinkageError::TooFewRuns(1)
        );
    }

    #[test]
    fn mv_gamma_examples() {
        assert!(log_mv_gamma(1, 1.0).unwrap().abs() < 1e-14);
        assert!((log_mv_gamma(1, 5.0).unwrap() - 24f64.ln()).abs() < 1e-13);
        let expect = 3.0 * 2.0 / 4.0 * std::f64::consts::PI.ln()
            + lgamma_ref(4.2)
            + lgamma_ref(3.7)
            + lgamma_ref(3.2);
        assert!((log_mv_gamma(3, 4.2).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(
            log_mv_gamma(3, 1.0),
            Err(ShrinkageError::GammaDomain { .. })
        ));
    }

    #[test]
    fn scalar_ell_transcription() {
        let runs = DMatrix::from_row_slice(1, 5, &[0.3, -1.2, 0.8, 2.0, -0.1]);
        let e = ensemble(runs.clone());
        let (_, d) = empirical_covariance(&e).unwrap();
        let w = d[0];
        let delta = DVector::from_element(1, 0.7);
        let a: f64 = 0.35;
        let (m, t) = (4.0, a / (1.0 - a));
        let big = m / (1.0 - a) + 2.0;
        let small = a * m / (1.0 - a) + 2.0;
        let expect = small * (t * 0.7f64).ln() - big * (w + t * 0.7).ln()
            + 2.0 * (lgamma_ref(big / 2.0) - lgamma_ref(small / 2.0));
        let got = marginal_log_likelihood(a, &delta, &e).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn ell_matches_dense_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let runs = DMatrix::from_fn(3, 8, |_, _| StandardNormal.sample(&mut rng));
        let delta = DVector::from_column_slice(&[0.4, 1.3, 0.9]);
        let got = marginal_log_likelihood(0.5, &delta, &ensemble(runs.clone())).unwrap();
        assert!((got - dense_ell(0.5, &delta, &runs)).abs() < 1e-8);
    }

    #[test]
    fn ell_finite_on_diagonal_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let runs = DMatrix::from_fn(6, 9, |i, _| {
            (1.0 + i as f64) * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let e = ensemble(runs);
        let (_, d) = empirical_covariance(&e).unwrap();
        assert!(marginal_log_likelihood(0.5, &d, &e).unwrap().is_finite());
        assert!(marginal_log_likelihood(1.0, &d, &e).is_err());
    }

    #[test]
    fn one_dimensional_collapse() {
        let runs = DMatrix::from_row_slice(1, 6, &[1.0, 2.0, 0.5, -0.4, 1.1, 3.0]);
        let prior = fit_shrinkage(&ensemble(runs.clone())).unwrap();
        let mean = runs.mean();
        let var = runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        let c = prior.c_hat.materialize().unwrap();
        assert!((c[(0, 0)] - var).abs() < 1e-12);
    }

    #[test]
    fn fitted_prior_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let runs = DMatrix::from_fn(12, 7, |_, _| StandardNormal.sample(&mut rng));
        let prior = fit_shrinkage(&ensemble(runs)).unwrap();
        assert!(prior.a_hat >= A_MIN && prior.a_hat <= A_MAX);
        assert!(prior.nu_hat > 2.0);
        assert!((prior.nu_hat - (2.0 + 7.0 / (1.0 - prior.a_hat))).abs() < 1e-12);
        let omega = &prior.omega_factor * prior.omega_factor.transpose();
        let c = prior.c_hat.materialize().unwrap();
        for i in 0..12 {
            assert!((c[(i, i)] - omega[(i, i)]).abs() < 1e-12);
            assert!((prior.delta_hat[i] - omega[(i, i)]).abs() <= 1e-14 * omega[(i, i)]);
        }
        assert!(c.cholesky().is_some());
    }

    #[test]
    fn fit_is_grid_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let runs = DMatrix::from_fn(10, 6, |_, _| StandardNormal.sample(&mut rng));
        let e = ensemble(runs);
        let prior = fit_shrinkage(&e).unwrap();
        let best = marginal_log_likelihood(prior.a_hat, &prior.delta_hat, &e).unwrap();
        for i in 1..200 {
            let a = i as f64 / 200.0;
            let v = marginal_log_likelihood(a, &prior.delta_hat, &e).unwrap();
            assert!(v <= best + 1e-9, "a={a}: {v} > {best}");
        }
    }

    fn high_regime_fraction(seed0: u64) -> usize {
        (0..100)
            .filter(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed0 + s);
                let scales = DMatrix::from_diagonal(&DVector::from_fn(40, |i, _| {
                    0.5 + (i % 5) as f64 * 0.3
                }));
                let runs = gaussian_runs(&scales, 5, &mut rng);
                fit_shrinkage(&ensemble(runs)).unwrap().a_hat > 0.5
            })
            .count()
    }

    fn low_regime_fraction(seed0: u64) -> usize {
        let n = 4;
        let corr = DMatrix::from_fn(n, n, |i, j| 0.9f64.powi((i as i32 - j as i32).abs()));
        let chol = corr.cholesky().unwrap().l();
        (0..100)
            .filter(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed0 + s);
                let runs = gaussian_runs(&chol, 400, &mut rng);
                fit_shrinkage(&ensemble(runs)).unwrap().a_hat < 0.5
            })
            .count()
    }

    #[test]
    fn recovers_high_intensity_regime() {
        let hits = high_regime_fraction(1000);
        assert!(hits >= 90, "{hits}/100");
    }

    #[test]
    fn recovers_low_intensity_regime() {
        let hits = low_regime_fraction(5000);
        assert!(hits >= 90, "{hits}/100");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ell_matches_dense(n in 1usize..=10, r0 in 2usize..=20, a in 0.01f64..0.99, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let runs = DMatrix::from_fn(n, r0, |_, _| StandardNormal.sample(&mut rng));
            let delta = DVector::from_fn(n, |_, _| 0.2 + rand::Rng::random::<f64>(&mut rng));
            let got = marginal_log_likelihood(a, &delta, &ensemble(runs.clone())).unwrap();
            let want = dense_ell(a, &delta, &runs);
            prop_assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()), "{} vs {}", got, want);
        }

        #[test]
        fn c_hat_positive_definite(a in 1e-6f64..(1.0 - 1e-6), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let runs = DMatrix::from_fn(6, 3, |_, _| StandardNormal.sample(&mut rng));
            let (f, d) = empirical_covariance(&ensemble(runs)).unwrap();
            let c = StructuredCovariance::new(&d * a, vec![LowRankTerm::new("control", f, 1.0 - a)]).unwrap();
            prop_assert!(c.materialize().unwrap().cholesky().is_some());
            prop_assert!(c.log_det().is_finite());
        }
    }
}
