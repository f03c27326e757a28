use nalgebra::DVector;
use serde::Serialize;
use super::{std_normal_cdf, CausalError};
use crate::lowrank::StructuredCovariance;
use crate::model::WorldPdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexLabel {
    Optimal,
    GlobalMean,
    PatternResidual,
    Projected,
    Custom,
}

/// Linear index `Z = φ'Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSpec {
    phi: DVector<f64>,
    pub label: IndexLabel,
}

impl IndexSpec {
    pub fn new(phi: DVector<f64>, label: IndexLabel) -> Result<Self, CausalError> {
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(CausalError::NonFiniteIndex);
        }
        if phi.iter().all(|&v| v == 0.0) {
            return Err(CausalError::ZeroIndex);
        }
        Ok(Self { phi, label })
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    pub fn n(&self) -> usize {
        self.phi.len()
    }

    pub fn apply(&self, y: &DVector<f64>) -> f64 {
        self.phi.dot(y)
    }

    pub fn negated(&self) -> Self {
        Self {
            phi: -&self.phi,
            label: self.label,
        }
    }
}

/// `φ* = Σ̂⁻¹(μ̂ − μ̄̂)` against the factual covariance.
pub fn optimal_index(factual: &WorldPdf, counterfactual: &WorldPdf) -> Result<IndexSpec, CausalError> {
    if factual.n() != counterfactual.n() {
        return Err(CausalError::Dimension {
            expected: factual.n(),
            got: counterfactual.n(),
        });
    }
    let contrast = &factual.mean - &counterfactual.mean;
    if contrast.iter().all(|&v| v == 0.0) {
        return Err(CausalError::DegenerateContrast);
    }
    IndexSpec::new(factual.cov.solve(&contrast)?, IndexLabel::Optimal)
}

/// Gaussian equal-covariance optimum `2F(½·√(dᵀΣ⁻¹d)) − 1`, `d = μ − μ̄`.
pub fn analytic_pns_gaussian(
    mu: &DVector<f64>,
    mu_bar: &DVector<f64>,
    cov: &StructuredCovariance,
) -> Result<f64, CausalError> {
    let d = mu - mu_bar;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let q = cov.quad_form(&d)?;
    Ok(2.0 * std_normal_cdf(0.5 * q.max(0.0).sqrt()) - 1.0)
}

/// Global-mean and residual-pattern parts of an index. A part that vanishes
/// (relative to the largest coefficient) is reported as `None`.
#[derive(Debug, Clone)]
pub struct SplitIndex {
    pub global: Option<IndexSpec>,
    pub residual: Option<IndexSpec>,
}

/// `global = mean(φ)·1`, `residual = φ − global`.
pub fn split_index(idx: &IndexSpec) -> SplitIndex {
    let phi = idx.phi();
    let n = phi.len();
    let mean = phi.mean();
    let global = DVector::from_element(n, mean);
    let residual = phi - &global;
    let floor = 1e-12 * phi.amax();
    let keep = |v: DVector<f64>, label| {
        if v.amax() <= floor {
            None
        } else {
            IndexSpec::new(v, label).ok()
        }
    };
    SplitIndex {
        global: keep(global, IndexLabel::GlobalMean),
        residual: keep(residual, IndexLabel::PatternResidual),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::LowRankTerm;
    use crate::model::World;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world(mean: DVector<f64>, cov: StructuredCovariance, label: World) -> WorldPdf {
        WorldPdf {
            mean,
            cov,
            nu: 30.0,
            label,
        }
    }

    fn random_cov(n: usize, rng: &mut ChaCha8Rng) -> StructuredCovariance {
        let d = DVector::from_fn(n, |_, _| rng.random_range(0.3..1.5));
        let u = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        StructuredCovariance::new(d, vec![LowRankTerm::new("control", u, 0.7)]).unwrap()
    }

    #[test]
    fn identity_covariance_gives_contrast() {
        let cov = StructuredCovariance::diagonal(DVector::from_element(3, 1.0)).unwrap();
        let mu = DVector::from_column_slice(&[1.0, 2.0, 0.5]);
        let mu_bar = DVector::from_column_slice(&[0.0, 1.5, 0.5]);
        let f = world(mu.clone(), cov.clone(), World::Factual);
        let c = world(mu_bar.clone(), cov, World::Counterfactual);
        let idx = optimal_index(&f, &c).unwrap();
        assert_eq!(idx.phi(), &(mu - mu_bar));
        assert_eq!(idx.label, IndexLabel::Optimal);
    }

    #[test]
    fn optimal_index_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cov = random_cov(5, &mut rng);
        let mu = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let mu_bar = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let dense = cov.materialize().unwrap().lu().solve(&(&mu - &mu_bar)).unwrap();
        let f = world(mu, cov.clone(), World::Factual);
        let c = world(mu_bar, cov, World::Counterfactual);
        let phi = optimal_index(&f, &c).unwrap();
        assert!((phi.phi() - &dense).norm() <= 1e-10 * dense.norm());
    }

    #[test]
    fn zero_contrast_rejected() {
        let cov = StructuredCovariance::diagonal(DVector::from_element(2, 1.0)).unwrap();
        let mu = DVector::from_element(2, 0.3);
        let f = world(mu.clone(), cov.clone(), World::Factual);
        let c = world(mu, cov, World::Counterfactual);
        assert!(matches!(optimal_index(&f, &c), Err(CausalError::DegenerateContrast)));
    }

    #[test]
    fn index_spec_invariants() {
        assert!(matches!(
            IndexSpec::new(DVector::zeros(3), IndexLabel::Custom),
            Err(CausalError::ZeroIndex)
        ));
        assert!(matches!(
            IndexSpec::new(DVector::from_element(2, f64::NAN), IndexLabel::Custom),
            Err(CausalError::NonFiniteIndex)
        ));
    }

    #[test]
    fn analytic_examples() {
        let one = StructuredCovariance::diagonal(DVector::from_element(1, 1.0)).unwrap();
        let mu = DVector::from_element(1, 0.0);
        assert_eq!(analytic_pns_gaussian(&mu, &mu, &one).unwrap(), 0.0);
        let v = analytic_pns_gaussian(&mu, &DVector::from_element(1, 2.0), &one).unwrap();
        assert!((v - 0.682_689_492_137_085_9).abs() < 1e-12, "{v}");
    }

    #[test]
    fn analytic_is_mahalanobis_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 4;
        let cov = random_cov(n, &mut rng);
        let mu = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let mu_bar = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let base = analytic_pns_gaussian(&mu, &mu_bar, &cov).unwrap();
        let a = DMatrix::from_fn(n, n, |i, j| {
            let base = if i == j { 2.0 } else { 0.0 };
            base + rng.random_range(-0.5..0.5)
        });
        let mapped = &a * cov.materialize().unwrap() * a.transpose();
        // Exact structured form: cI + LL' with LL' = M − cI.
        let c = 0.5 * mapped.clone().symmetric_eigenvalues().min();
        let shifted = &mapped - DMatrix::identity(n, n) * c;
        let l = shifted.cholesky().unwrap().l();
        let mapped_cov = StructuredCovariance::new(
            DVector::from_element(n, c),
            vec![LowRankTerm::new("full", l, 1.0)],
        )
        .unwrap();
        let got = analytic_pns_gaussian(&(&a * &mu), &(&a * &mu_bar), &mapped_cov).unwrap();
        assert!((got - base).abs() < 1e-10, "{got} vs {base}");
    }

    #[test]
    fn split_examples() {
        let c = IndexSpec::new(DVector::from_element(4, 0.7), IndexLabel::Optimal).unwrap();
        let s = split_index(&c);
        assert!(s.residual.is_none());
        assert_eq!(s.global.unwrap().label, IndexLabel::GlobalMean);

        let c = IndexSpec::new(DVector::from_column_slice(&[1.0, -1.0]), IndexLabel::Optimal).unwrap();
        let s = split_index(&c);
        assert!(s.global.is_none());
        assert_eq!(s.residual.unwrap().phi(), c.phi());
    }

    #[test]
    fn split_recombines() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let phi = DVector::from_fn(54, |_, _| rng.random_range(-3.0..3.0));
        let idx = IndexSpec::new(phi.clone(), IndexLabel::Optimal).unwrap();
        let s = split_index(&idx);
        let g = s.global.unwrap();
        let r = s.residual.unwrap();
        let back = g.phi() + r.phi();
        for i in 0..54 {
            assert!((back[i] - phi[i]).abs() <= 4.0 * f64::EPSILON * phi[i].abs().max(g.phi()[i].abs()));
        }
        assert!(r.phi().sum().abs() < 1e-12);
    }
}
