//! Synthetic ensembles from a known generative model.
//!
//! Every run, and the observation, scales each forcing it contains by its own
//! draw `βᵢ ~ N(1, ω²)` and adds internal variability `N(0, C_true)`:
//!
//! ```text
//! run = μ_true + Σᵢ (βᵢ − 1)·x_trueᵢ + N(0, C_true)
//! y   = run + N(0, σ²I)
//! ```
//!
//! Individual and counterfactual runs sum only the forcings they contain;
//! control runs are variability alone.
//!
//! `C_true = S^½ (R_s ⊗ R_t) S^½` with equicorrelation `ρ_s` across regions,
//! AR(1) correlation `ρ_t` across periods and per-cell variances `S`.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Ensemble, SpaceTimeLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid truth spec: {0}")]
    Invalid(String),
    #[error("unknown forcing `{0}` in truth spec")]
    UnknownForcing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingTruth {
    pub name: String,
    /// True response `x_true` (length n).
    pub response: Vec<f64>,
    pub runs: usize,
    /// Run count of an explicit "all forcings but this one" ensemble.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_runs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilitySpec {
    /// Variance applied to every cell unless `profile` is given.
    pub variance: f64,
    pub rho_t: f64,
    pub rho_s: f64,
    /// Per-cell variances overriding `variance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub n_regions: usize,
    pub n_periods: usize,
    pub forcings: Vec<ForcingTruth>,
    /// Combined forced response; defaults to the sum of the individual
    /// responses (additivity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_true: Option<Vec<f64>>,
    pub variability: VariabilitySpec,
    pub sigma: f64,
    pub omega: f64,
    pub factual_runs: usize,
    pub control_runs: usize,
    pub seed: u64,
}

impl TruthSpec {
    pub fn n(&self) -> usize {
        self.n_regions * self.n_periods
    }

    pub fn is_additive(&self) -> bool {
        self.mu_true.is_none()
    }

    pub fn x_true(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, self.forcings.len(), |i, j| self.forcings[j].response[i])
    }

    pub fn mu_true(&self) -> DVector<f64> {
        match &self.mu_true {
            Some(m) => DVector::from_column_slice(m),
            None => self.x_true().column_sum(),
        }
    }

    /// Counterfactual truth for `forcing`: `μ_true − x_f`.
    pub fn mu_bar_true(&self, forcing: &str) -> Result<DVector<f64>, SynthError> {
        let f = self.forcing_position(forcing)?;
        Ok(self.mu_true() - DVector::from_column_slice(&self.forcings[f].response))
    }

    fn forcing_position(&self, forcing: &str) -> Result<usize, SynthError> {
        self.forcings
            .iter()
            .position(|f| f.name == forcing)
            .ok_or_else(|| SynthError::UnknownForcing(forcing.to_string()))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        let n = self.n();
        if n == 0 {
            return bad("layout has no cells".into());
        }
        if self.forcings.is_empty() {
            return bad("at least one forcing is required".into());
        }
        for f in &self.forcings {
            if f.response.len() != n {
                return bad(format!(
                    "forcing `{}` response has length {}, expected {n}",
                    f.name,
                    f.response.len()
                ));
            }
            if f.runs == 0 || f.counterfactual_runs == Some(0) {
                return bad(format!("forcing `{}` needs at least one run", f.name));
            }
            if f.response.iter().any(|v| !v.is_finite()) {
                return bad(format!("forcing `{}` response is not finite", f.name));
            }
        }
        if let Some(m) = &self.mu_true {
            if m.len() != n || m.iter().any(|v| !v.is_finite()) {
                return bad(format!("mu_true must have {n} finite entries"));
            }
        }
        let v = &self.variability;
        if !(v.rho_t.abs() < 1.0) {
            return bad(format!("rho_t = {} must satisfy |rho_t| < 1", v.rho_t));
        }
        let floor = if self.n_regions > 1 {
            -1.0 / (self.n_regions as f64 - 1.0)
        } else {
            -1.0
        };
        if !(v.rho_s < 1.0 && v.rho_s > floor) {
            return bad(format!(
                "rho_s = {} must lie in ({floor}, 1) for {} regions",
                v.rho_s, self.n_regions
            ));
        }
        let variances: Vec<f64> = match &v.profile {
            Some(p) if p.len() != n => return bad(format!("variance profile must have {n} entries")),
            Some(p) => p.clone(),
            None => vec![v.variance],
        };
        if variances.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("variances must be finite and >= 0".into());
        }
        if !(self.sigma >= 0.0 && self.omega >= 0.0) {
            return bad("sigma and omega must be >= 0".into());
        }
        if self.factual_runs == 0 || self.control_runs == 0 {
            return bad("run counts must be >= 1".into());
        }
        Ok(())
    }

    /// Dense `C_true`.
    pub fn c_true(&self) -> DMatrix<f64> {
        let (m, t) = (self.n_regions, self.n_periods);
        let v = &self.variability;
        let sd: Vec<f64> = match &v.profile {
            Some(p) => p.iter().map(|s| s.sqrt()).collect(),
            None => vec![v.variance.sqrt(); m * t],
        };
        DMatrix::from_fn(m * t, m * t, |i, j| {
            let (gi, ti) = (i / t, i % t);
            let (gj, tj) = (j / t, j % t);
            let rs = if gi == gj { 1.0 } else { v.rho_s };
            let rt = v.rho_t.powi((ti as i32 - tj as i32).abs());
            sd[i] * sd[j] * rs * rt
        })
    }

    /// Bundled strong-signal scenario on a 6-region × 9-period layout with
    /// natural (NAT) and anthropogenic (ANT) forcings, three runs per
    /// experiment and ten control runs.
    pub fn bundled_scenario(seed: u64) -> Self {
        let (m, t) = (6usize, 9usize);
        let n = m * t;
        let nat: Vec<f64> = (0..n)
            .map(|i| {
                let (g, p) = (i / t, i % t);
                0.08 * ((p as f64) * 1.3 + g as f64 * 0.4).sin() - if p == 6 { 0.1 } else { 0.0 }
            })
            .collect();
        let ant: Vec<f64> = (0..n)
            .map(|i| {
                let (g, p) = (i / t, i % t);
                let amp = 0.8 + 0.1 * g as f64;
                amp * (p as f64 / (t - 1) as f64).powi(2)
            })
            .collect();
        Self {
            n_regions: m,
            n_periods: t,
            forcings: vec![
                ForcingTruth {
                    name: "NAT".into(),
                    response: nat,
                    runs: 3,
                    counterfactual_runs: None,
                },
                ForcingTruth {
                    name: "ANT".into(),
                    response: ant,
                    runs: 3,
                    counterfactual_runs: Some(3),
                },
            ],
            mu_true: None,
            variability: VariabilitySpec {
                variance: 0.02,
                rho_t: 0.3,
                rho_s: 0.3,
                profile: None,
            },
            sigma: 0.1,
            omega: 0.1,
            factual_runs: 3,
            control_runs: 10,
            seed,
        }
    }
}

enum Job {
    Observation,
    Factual,
    Individual(usize),
    Counterfactual(usize),
    Control,
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Draws `cols` runs of `mean + Σ_{i∈active} (βᵢ − 1)·xᵢ + N(0, C_true)` with
/// a fresh `β ~ N(1, ω²)` per run.
fn draw_runs(
    mean: &DVector<f64>,
    x: &DMatrix<f64>,
    active: &[usize],
    omega: f64,
    l: &DMatrix<f64>,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(mean.len(), cols);
    for j in 0..cols {
        let mut run = mean.clone();
        for &i in active {
            let dev = omega * std_normal(rng);
            run.axpy(dev, &x.column(i), 1.0);
        }
        let z = DVector::from_fn(l.ncols(), |_, _| std_normal(rng));
        run.gemv(1.0, l, &z, 1.0);
        out.set_column(j, &run);
    }
    out
}

/// Lower factor of `C_true`; zero when the variance vanishes.
fn variability_factor(t: &TruthSpec) -> Result<DMatrix<f64>, SynthError> {
    let c = t.c_true();
    if c.iter().all(|&v| v == 0.0) {
        return Ok(c);
    }
    // Zero-variance cells leave C_true singular; factor through the
    // eigen-decomposition, which tolerates that.
    let eig = c.symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-10 * eig.eigenvalues.amax() {
            return Err(SynthError::Invalid("C_true is not positive semidefinite".into()));
        }
        l.column_mut(j).scale_mut(lam.max(0.0).sqrt());
    }
    Ok(l)
}

/// Draws a dataset from the spec. Each ensemble has its own ChaCha8 stream of
/// the spec's seed, so output depends only on the seed.
pub fn generate_dataset(t: &TruthSpec) -> Result<Dataset, SynthError> {
    t.validate()?;
    let n = t.n();
    let l = variability_factor(t)?;
    let x = t.x_true();
    let mu = t.mu_true();
    let p = t.forcings.len();

    let mut jobs = vec![Job::Observation, Job::Factual];
    jobs.extend((0..p).map(Job::Individual));
    jobs.extend(
        (0..p)
            .filter(|&i| t.forcings[i].counterfactual_runs.is_some())
            .map(Job::Counterfactual),
    );
    jobs.push(Job::Control);

    let out: Vec<DMatrix<f64>> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, job)| {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            rng.set_stream(k as u64);
            let all: Vec<usize> = (0..p).collect();
            match *job {
                Job::Observation => {
                    let mut y = draw_runs(&mu, &x, &all, t.omega, &l, 1, &mut rng);
                    for v in y.iter_mut() {
                        *v += t.sigma * std_normal(&mut rng);
                    }
                    y
                }
                Job::Factual => draw_runs(&mu, &x, &all, t.omega, &l, t.factual_runs, &mut rng),
                Job::Individual(i) => {
                    let xi = x.column(i).clone_owned();
                    draw_runs(&xi, &x, &[i], t.omega, &l, t.forcings[i].runs, &mut rng)
                }
                Job::Counterfactual(i) => {
                    let r = t.forcings[i].counterfactual_runs.unwrap_or(1);
                    let others: Vec<usize> = all.iter().copied().filter(|&k| k != i).collect();
                    draw_runs(&(&mu - x.column(i)), &x, &others, t.omega, &l, r, &mut rng)
                }
                Job::Control => draw_runs(&DVector::zeros(n), &x, &[], 0.0, &l, t.control_runs, &mut rng),
            }
        })
        .collect();

    let ens = |name: &str, m: &DMatrix<f64>| {
        Ensemble::new(name, m.clone()).map_err(|e| SynthError::Invalid(e.to_string()))
    };
    let mut it = jobs.iter().zip(&out);
    let mut y = None;
    let mut factual = None;
    let mut individual = Vec::with_capacity(p);
    let mut counterfactual = IndexMap::new();
    let mut control = None;
    for (job, m) in &mut it {
        match *job {
            Job::Observation => y = Some(m.column(0).clone_owned()),
            Job::Factual => factual = Some(ens("factual", m)?),
            Job::Individual(i) => individual.push(ens(&t.forcings[i].name, m)?),
            Job::Counterfactual(i) => {
                let name = &t.forcings[i].name;
                counterfactual.insert(name.clone(), Some(ens(&format!("all_but_{name}"), m)?));
            }
            Job::Control => control = Some(ens("control", m)?),
        }
    }
    let layout = SpaceTimeLayout::new(t.n_regions, t.n_periods)
        .map_err(|e| SynthError::Invalid(e.to_string()))?;
    Dataset::new(
        y.expect("observation job"),
        layout,
        factual.expect("factual job"),
        counterfactual,
        individual,
        control.expect("control job"),
    )
    .map_err(|e| SynthError::Invalid(e.to_string()))
}

/// As [`generate_dataset`] with the forcing's response removed everywhere, so
/// the factual and counterfactual generators coincide.
pub fn null_dataset(t: &TruthSpec, forcing: &str) -> Result<Dataset, SynthError> {
    let f = t.forcing_position(forcing)?;
    let mut spec = t.clone();
    if let Some(mu) = spec.mu_true.as_mut() {
        for (m, x) in mu.iter_mut().zip(&t.forcings[f].response) {
            *m -= x;
        }
    }
    spec.forcings[f].response.iter_mut().for_each(|v| *v = 0.0);
    generate_dataset(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dataset, write_dataset};

    fn small_spec(seed: u64) -> TruthSpec {
        TruthSpec {
            n_regions: 2,
            n_periods: 2,
            forcings: vec![ForcingTruth {
                name: "F".into(),
                response: vec![1.0, 2.0, 0.5, -1.0],
                runs: 10,
                counterfactual_runs: Some(10),
            }],
            mu_true: None,
            variability: VariabilitySpec {
                variance: 0.5,
                rho_t: 0.4,
                rho_s: 0.2,
                profile: None,
            },
            sigma: 0.0,
            omega: 0.0,
            factual_runs: 10,
            control_runs: 10,
            seed,
        }
    }

    #[test]
    fn noiseless_runs_equal_truth() {
        let mut t = TruthSpec::bundled_scenario(1);
        t.variability.variance = 0.0;
        t.sigma = 0.0;
        t.omega = 0.0;
        let d = generate_dataset(&t).unwrap();
        let mu = t.mu_true();
        for c in d.factual.runs().column_iter() {
            assert_eq!(c.clone_owned(), mu);
        }
        assert_eq!(d.y, mu);
    }

    #[test]
    fn bundled_scenario_is_valid() {
        let t = TruthSpec::bundled_scenario(7);
        let d = generate_dataset(&t).unwrap();
        assert_eq!(d.n(), 54);
        assert_eq!(d.factual.r(), 3);
        assert_eq!(d.counterfactual_for("ANT").unwrap().r(), 3);
        assert_eq!(d.control.r(), 10);
        assert_eq!(d.p(), 2);
        assert!(t.c_true().cholesky().is_some());
    }

    #[test]
    fn same_seed_same_bytes() {
        let t = TruthSpec::bundled_scenario(11);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &generate_dataset(&t).unwrap()).unwrap();
        write_dataset(b.path(), &generate_dataset(&t).unwrap()).unwrap();
        for entry in std::fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let d1 = single.install(|| generate_dataset(&t).unwrap());
        assert_eq!(d1.y, generate_dataset(&t).unwrap().y);
    }

    #[test]
    fn written_dataset_round_trips() {
        let t = TruthSpec::bundled_scenario(3);
        let d = generate_dataset(&t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &d).unwrap();
        let back = load_dataset(&manifest).unwrap();
        assert_eq!(back.y, d.y);
        assert_eq!(back.factual, d.factual);
        assert_eq!(back.individual, d.individual);
        assert_eq!(back.control, d.control);
    }

    #[test]
    fn additivity_counterfactual_truth() {
        let t = TruthSpec::bundled_scenario(0);
        let x = t.x_true();
        let expect = x.column(0).clone_owned();
        assert_eq!(t.mu_bar_true("ANT").unwrap(), t.mu_true() - x.column(1));
        assert!((t.mu_bar_true("ANT").unwrap() - expect).amax() < 1e-15);
    }

    #[test]
    fn rejects_bad_correlations() {
        let mut t = TruthSpec::bundled_scenario(0);
        t.variability.rho_t = 1.0;
        assert!(generate_dataset(&t).is_err());
        let mut t = TruthSpec::bundled_scenario(0);
        t.variability.rho_s = -0.25;
        assert!(matches!(generate_dataset(&t), Err(SynthError::Invalid(_))));
    }

    #[test]
    fn null_worlds_differ_by_sampling_noise_only() {
        let gap = |runs: usize| {
            let mut total = 0.0;
            for s in 0..40 {
                let mut t = small_spec(100 + s);
                t.factual_runs = runs;
                t.forcings[0].counterfactual_runs = Some(runs);
                let d = null_dataset(&t, "F").unwrap();
                total += (d.factual.mean() - d.counterfactual_for("F").unwrap().mean()).norm();
            }
            total / 40.0
        };
        let ratio = gap(10) / gap(40);
        assert!((ratio / 2.0 - 1.0).abs() < 0.5 && ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "{ratio}");
    }

    #[test]
    fn sample_covariance_converges() {
        let dist = |r: usize| {
            let mut t = small_spec(5);
            t.omega = 0.5;
            t.forcings[0].runs = r;
            let d = generate_dataset(&t).unwrap();
            let runs = d.individual[0].runs();
            let mean = runs.column_mean();
            let mut c = runs.clone();
            for mut col in c.column_iter_mut() {
                col -= &mean;
            }
            let sample = &c * c.transpose() / (r as f64 - 1.0);
            let x = t.x_true();
            let target = t.c_true() + &x * x.transpose() * t.omega.powi(2);
            (sample - target).norm()
        };
        let (a, b, c) = (dist(10), dist(100), dist(1000));
        assert!(a > b && b > c, "{a} {b} {c}");
    }
}
