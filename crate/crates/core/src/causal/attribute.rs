use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::index::{analytic_pns_gaussian, optimal_index, split_index, IndexLabel, IndexSpec};
use super::kde::kernel_cdf;
use super::language::{calibrate_language, Calibration};
use super::sampling::sample_indices;
use super::threshold::{optimize_threshold, Criterion, Curves, ThresholdSummary};
use super::CausalError;
use crate::dataset::Dataset;
use crate::model::{
    assemble_inputs, counterfactual_pdf, factual_pdf, fit_variance_params, uncertainty_decomposition,
    FittedModel, ModelError, ModelInputs, UncertaintyShares, VarianceParams, WorldPdf,
};
use crate::{Error, Stage};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeOptions {
    pub samples: usize,
    pub seed: u64,
    pub criterion: Criterion,
}

impl Default for AttributeOptions {
    fn default() -> Self {
        Self {
            samples: 200_000,
            seed: 42,
            criterion: Criterion::Pns,
        }
    }
}

/// Fitted model and both worlds for one forcing.
#[derive(Debug, Clone)]
pub struct FittedWorlds {
    pub inputs: ModelInputs,
    pub params: VarianceParams,
    pub factual: WorldPdf,
    pub counterfactual: WorldPdf,
}

impl FittedWorlds {
    pub fn dump(&self) -> FittedModel {
        FittedModel::new(&self.inputs, &self.params, &self.counterfactual)
    }

    pub fn decomposition(&self) -> UncertaintyShares {
        uncertainty_decomposition(&self.inputs, &self.params)
    }
}

pub fn fit_worlds(d: &Dataset, forcing: &str) -> Result<FittedWorlds, Error> {
    let inputs = assemble_inputs(d, forcing).map_err(|e| match e {
        ModelError::Shrinkage(_) => Error::at(Stage::Shrinkage)(e.into()),
        _ => Error::at(Stage::Assemble)(e.into()),
    })?;
    let params = fit_variance_params(&inputs).map_err(|e| Error::at(Stage::VarianceFit)(e.into()))?;
    let factual = factual_pdf(&inputs, &params).map_err(|e| Error::at(Stage::Worlds)(e.into()))?;
    let counterfactual =
        counterfactual_pdf(&inputs, &params).map_err(|e| Error::at(Stage::Worlds)(e.into()))?;
    Ok(FittedWorlds {
        inputs,
        params,
        factual,
        counterfactual,
    })
}

/// Threshold optimization result for one index.
#[derive(Debug, Clone, Serialize)]
pub struct IndexAttribution {
    pub label: IndexLabel,
    /// True when the index was negated so that the factual world lies above
    /// the counterfactual one along it.
    pub flipped: bool,
    #[serde(flatten)]
    pub threshold: ThresholdSummary,
    /// Calibrated term and sigma level for PNS.
    pub language: Calibration,
    pub factual_bandwidth: f64,
    pub counterfactual_bandwidth: f64,
    pub coefficients: Vec<f64>,
    #[serde(skip)]
    pub curves: Curves,
}

fn stage<E: Into<Error>>(s: Stage) -> impl FnOnce(E) -> Error {
    move |e| Error::at(s)(e.into())
}

/// Samples both worlds once, projects the draws on every index, and optimizes
/// each index's threshold against its observed value.
pub fn attribute_indices(
    factual: &WorldPdf,
    counterfactual: &WorldPdf,
    y: &DVector<f64>,
    indices: &[&IndexSpec],
    opts: &AttributeOptions,
) -> Result<Vec<IndexAttribution>, Error> {
    let contrast = &factual.mean - &counterfactual.mean;
    let oriented: Vec<(IndexSpec, bool)> = indices
        .iter()
        .map(|idx| {
            if idx.phi().dot(&contrast) < 0.0 {
                (idx.negated(), true)
            } else {
                ((*idx).clone(), false)
            }
        })
        .collect();
    let refs: Vec<&IndexSpec> = oriented.iter().map(|(i, _)| i).collect();
    let z_f = sample_indices(factual, &refs, opts.samples, opts.seed).map_err(stage(Stage::Sampling))?;
    let z_c =
        sample_indices(counterfactual, &refs, opts.samples, opts.seed).map_err(stage(Stage::Sampling))?;

    oriented
        .iter()
        .zip(z_f.iter().zip(&z_c))
        .map(|((idx, flipped), (zf, zc))| {
            let g = kernel_cdf(zf).map_err(stage(Stage::Threshold))?;
            let g_bar = kernel_cdf(zc).map_err(stage(Stage::Threshold))?;
            let z_obs = idx.apply(y);
            let (opt, curves) =
                optimize_threshold(&g, &g_bar, z_obs, opts.criterion).map_err(stage(Stage::Threshold))?;
            Ok(IndexAttribution {
                label: idx.label,
                flipped: *flipped,
                language: calibrate_language(opt.pns),
                threshold: ThresholdSummary {
                    u_star: opt.u_star,
                    z_obs,
                    p: opt.p,
                    p_bar: opt.p_bar,
                    pn: opt.pn,
                    ps: opt.ps,
                    pns: opt.pns,
                },
                factual_bandwidth: g.bandwidth,
                counterfactual_bandwidth: g_bar.bandwidth,
                coefficients: idx.phi().iter().copied().collect(),
                curves,
            })
        })
        .collect()
}

/// Attribution along the optimal index and its global-mean and pattern parts.
#[derive(Debug, Clone)]
pub struct WorldsAttribution {
    pub optimal: IndexSpec,
    pub total: IndexAttribution,
    pub global: Option<IndexAttribution>,
    pub pattern: Option<IndexAttribution>,
}

pub fn attribute_worlds(
    factual: &WorldPdf,
    counterfactual: &WorldPdf,
    y: &DVector<f64>,
    opts: &AttributeOptions,
) -> Result<WorldsAttribution, Error> {
    let optimal = optimal_index(factual, counterfactual).map_err(stage::<CausalError>(Stage::Index))?;
    let split = split_index(&optimal);
    let mut indices = vec![&optimal];
    indices.extend(split.global.as_ref());
    indices.extend(split.residual.as_ref());
    let mut results = attribute_indices(factual, counterfactual, y, &indices, opts)?.into_iter();
    let total = results.next().expect("optimal index result");
    let global = split.global.as_ref().and_then(|_| results.next());
    let pattern = split.residual.as_ref().and_then(|_| results.next());
    Ok(WorldsAttribution {
        optimal,
        total,
        global,
        pattern,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalReport {
    pub schema_version: u32,
    pub forcing: String,
    pub options: AttributeOptions,
    /// Caller-supplied configuration echo (for instance the command line).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub total: IndexAttribution,
    pub global_mean: Option<IndexAttribution>,
    pub pattern_residual: Option<IndexAttribution>,
    /// How the global component's coefficient is formed from the optimal
    /// index.
    pub global_mean_convention: &'static str,
    pub decomposition: UncertaintyShares,
    pub variance: VarianceParams,
    pub a_hat: f64,
    pub nu_hat: f64,
    /// Gaussian equal-covariance value for the same contrast, for comparison.
    pub analytic_gaussian_pns: f64,
    #[serde(skip)]
    pub model: FittedModel,
}

impl CausalReport {
    pub fn pns(&self) -> f64 {
        self.total.threshold.pns
    }
}

/// End-to-end attribution of the observation to `forcing`.
pub fn attribute(d: &Dataset, forcing: &str, opts: &AttributeOptions) -> Result<CausalReport, Error> {
    let worlds = fit_worlds(d, forcing)?;
    report_for(&worlds, &d.y, forcing, opts)
}

pub(crate) fn report_for(
    worlds: &FittedWorlds,
    y: &DVector<f64>,
    forcing: &str,
    opts: &AttributeOptions,
) -> Result<CausalReport, Error> {
    let a = attribute_worlds(&worlds.factual, &worlds.counterfactual, y, opts)?;
    let analytic = analytic_pns_gaussian(
        &worlds.factual.mean,
        &worlds.counterfactual.mean,
        &worlds.factual.cov,
    )
    .map_err(stage(Stage::Index))?;
    Ok(CausalReport {
        schema_version: SCHEMA_VERSION,
        forcing: forcing.to_string(),
        options: *opts,
        config: None,
        total: a.total,
        global_mean: a.global,
        pattern_residual: a.pattern,
        global_mean_convention: "mean of coefficients",
        decomposition: worlds.decomposition(),
        variance: worlds.params.clone(),
        a_hat: worlds.inputs.prior.a_hat,
        nu_hat: worlds.inputs.prior.nu_hat,
        analytic_gaussian_pns: analytic,
        model: worlds.dump(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::StructuredCovariance;
    use crate::model::World;

    fn worlds(delta: f64) -> (WorldPdf, WorldPdf) {
        let cov = StructuredCovariance::diagonal(DVector::from_element(2, 1.0)).unwrap();
        let f = WorldPdf {
            mean: DVector::from_column_slice(&[delta, 0.0]),
            cov: cov.clone(),
            nu: f64::INFINITY,
            label: World::Factual,
        };
        let c = WorldPdf {
            mean: DVector::zeros(2),
            cov,
            nu: f64::INFINITY,
            label: World::Counterfactual,
        };
        (f, c)
    }

    #[test]
    fn reversed_index_is_oriented() {
        let (f, c) = worlds(2.0);
        let idx = IndexSpec::new(DVector::from_column_slice(&[-1.0, 0.0]), IndexLabel::Custom).unwrap();
        let opts = AttributeOptions {
            samples: 20_000,
            ..Default::default()
        };
        let y = DVector::from_column_slice(&[2.0, 0.0]);
        let r = attribute_indices(&f, &c, &y, &[&idx], &opts).unwrap();
        assert!(r[0].flipped);
        assert_eq!(r[0].coefficients, vec![1.0, 0.0]);
        assert!(r[0].threshold.pns > 0.6);
    }

    #[test]
    fn single_cell_split_has_no_pattern() {
        let (f, c) = worlds(1.0);
        let opts = AttributeOptions {
            samples: 20_000,
            ..Default::default()
        };
        let y = DVector::from_column_slice(&[1.0, 0.0]);
        let a = attribute_worlds(&f, &c, &y, &opts).unwrap();
        assert!(a.global.is_some() && a.pattern.is_some());
        assert_eq!(a.total.label, IndexLabel::Optimal);
        assert!(a.total.threshold.u_star < a.total.threshold.z_obs);
    }

    #[test]
    fn zero_contrast_is_index_stage_error() {
        let (f, _) = worlds(1.0);
        let mut c = f.clone();
        c.label = World::Counterfactual;
        let y = DVector::zeros(2);
        let err = attribute_worlds(&f, &c, &y, &AttributeOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: Stage::Index, .. }));
        assert!(!err.is_validation());
    }
}
