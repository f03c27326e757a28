use serde::{Deserialize, Serialize};

use super::kde::CdfEstimate;
use super::probs::causation_probs;
use super::{finite_or_null, CausalError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Pns,
    Pn,
}

impl std::str::FromStr for Criterion {
    type Err = CausalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pns" => Ok(Criterion::Pns),
            "pn" => Ok(Criterion::Pn),
            other => Err(CausalError::InvalidOption(format!(
                "criterion `{other}` (expected pns or pn)"
            ))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Pns => "pns",
            Criterion::Pn => "pn",
        })
    }
}

/// Per-threshold curves on the merged grid. `pn`/`ps` are `None` where their
/// denominators fall below one sample's worth of probability.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub u: Vec<f64>,
    pub g: Vec<f64>,
    pub g_bar: Vec<f64>,
    pub pn: Vec<Option<f64>>,
    pub ps: Vec<Option<f64>>,
    pub pns: Vec<f64>,
}

impl Curves {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdOptimum {
    pub u_star: f64,
    /// Factual event probability `1 − G(u*)`.
    pub p: f64,
    /// Counterfactual event probability `1 − Ḡ(u*)`.
    pub p_bar: f64,
    pub pn: Option<f64>,
    pub ps: Option<f64>,
    pub pns: f64,
}

fn merged_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = a.iter().chain(b).copied().collect();
    u.sort_by(f64::total_cmp);
    u.dedup();
    u
}

/// Scans the merged grid of both CDFs below `z_obs` for the threshold
/// maximizing the criterion, breaking ties toward the largest `u`.
pub fn optimize_threshold(
    g: &CdfEstimate,
    g_bar: &CdfEstimate,
    z_obs: f64,
    criterion: Criterion,
) -> Result<(ThresholdOptimum, Curves), CausalError> {
    if z_obs.is_nan() {
        return Err(CausalError::InvalidOption("observed index is NaN".into()));
    }
    let u = merged_grid(&g.grid, &g_bar.grid);
    let floor = 1.0 / g.sample_count as f64;
    let floor_bar = 1.0 / g_bar.sample_count as f64;
    let mut curves = Curves {
        u: Vec::with_capacity(u.len()),
        g: Vec::with_capacity(u.len()),
        g_bar: Vec::with_capacity(u.len()),
        pn: Vec::with_capacity(u.len()),
        ps: Vec::with_capacity(u.len()),
        pns: Vec::with_capacity(u.len()),
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, &ui) in u.iter().enumerate() {
        let gi = g.eval(ui);
        let gbi = g_bar.eval(ui);
        let t = causation_probs(1.0 - gi, 1.0 - gbi);
        // Same quantity as t.pns, formed without the 1 − · round trip.
        let pns = (gbi - gi).clamp(0.0, 1.0);
        let pn = (1.0 - gi >= floor).then_some(t.pn);
        let ps = (gbi >= floor_bar).then_some(t.ps);
        curves.u.push(ui);
        curves.g.push(gi);
        curves.g_bar.push(gbi);
        curves.pn.push(pn);
        curves.ps.push(ps);
        curves.pns.push(pns);
        if ui >= z_obs {
            continue;
        }
        let score = match criterion {
            Criterion::Pns => Some(pns),
            Criterion::Pn => pn,
        };
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s >= b) {
                best = Some((i, s));
            }
        }
    }
    let (i, _) = best.ok_or(CausalError::InfeasibleThreshold {
        z_obs,
        grid_min: u[0],
    })?;
    Ok((
        ThresholdOptimum {
            u_star: curves.u[i],
            p: 1.0 - curves.g[i],
            p_bar: 1.0 - curves.g_bar[i],
            pn: curves.pn[i],
            ps: curves.ps[i],
            pns: curves.pns[i],
        },
        curves,
    ))
}

/// Serializable view of one attribution's threshold result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdSummary {
    #[serde(serialize_with = "finite_or_null")]
    pub u_star: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub z_obs: f64,
    pub p: f64,
    pub p_bar: f64,
    pub pn: Option<f64>,
    pub ps: Option<f64>,
    pub pns: f64,
}
