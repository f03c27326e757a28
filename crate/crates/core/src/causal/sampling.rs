use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use super::{CausalError, IndexSpec};
use crate::model::{World, WorldPdf};

/// Draws per chunk. Chunk `c` of world `w` uses stream `(tag(w) << 32) | c`
/// of the seed's ChaCha8 generator, so output does not depend on how chunks
/// are scheduled.
pub const CHUNK: usize = 8192;
pub const MIN_SAMPLES: usize = 1000;

fn world_tag(label: World) -> u64 {
    match label {
        World::Factual => 1,
        World::Counterfactual => 2,
    }
}

/// `N` draws of `Z = φ'Y` for `Y` Student-t with the world's mean and variance.
pub fn sample_index(
    w: &WorldPdf,
    idx: &IndexSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, CausalError> {
    Ok(sample_indices(w, &[idx], n_samples, seed)?.remove(0))
}

/// Projects the same `N` draws of `Y` onto each index.
///
/// `Y = μ + (D^½ε₀ + Σⱼ √wⱼUⱼεⱼ)·√((ν−2)/W)` with `W ~ Gamma(ν/2, scale 2)`.
pub fn sample_indices(
    w: &WorldPdf,
    indices: &[&IndexSpec],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, CausalError> {
    if n_samples < MIN_SAMPLES {
        return Err(CausalError::TooFewSamples {
            got: n_samples,
            min: MIN_SAMPLES,
        });
    }
    for idx in indices {
        if idx.n() != w.n() {
            return Err(CausalError::Dimension {
                expected: w.n(),
                got: idx.n(),
            });
        }
    }
    if !(w.nu > 2.0) {
        return Err(CausalError::InvalidOption(format!(
            "degrees of freedom {} must exceed 2",
            w.nu
        )));
    }
    let (sqrt_diag, stacked) = w.cov.sampling_factor();
    let diag_coef: Vec<Vec<f64>> = indices
        .iter()
        .map(|idx| idx.phi().component_mul(&sqrt_diag).iter().copied().collect())
        .collect();
    let low_coef: Vec<Vec<f64>> = indices
        .iter()
        .map(|idx| stacked.tr_mul(idx.phi()).iter().copied().collect())
        .collect();
    let centers: Vec<f64> = indices.iter().map(|idx| idx.apply(&w.mean)).collect();
    let gamma = if w.nu.is_finite() {
        Some(Gamma::new(w.nu / 2.0, 2.0).map_err(|e| CausalError::InvalidOption(e.to_string()))?)
    } else {
        None
    };

    let k = indices.len();
    let n_chunks = n_samples.div_ceil(CHUNK);
    let tag = world_tag(w.label);
    let chunks: Vec<Vec<Vec<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n_samples - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((tag << 32) | c as u64);
            let mut out = vec![Vec::with_capacity(len); k];
            let mut acc = vec![0.0; k];
            for _ in 0..len {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for i in 0..sqrt_diag.len() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    for (a, coef) in acc.iter_mut().zip(&diag_coef) {
                        *a += coef[i] * e;
                    }
                }
                for j in 0..stacked.ncols() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    for (a, coef) in acc.iter_mut().zip(&low_coef) {
                        *a += coef[j] * e;
                    }
                }
                let scale = match &gamma {
                    Some(g) => ((w.nu - 2.0) / g.sample(&mut rng)).sqrt(),
                    None => 1.0,
                };
                for ((o, a), m) in out.iter_mut().zip(&acc).zip(&centers) {
                    o.push(m + a * scale);
                }
            }
            out
        })
        .collect();

    let mut merged = vec![Vec::with_capacity(n_samples); k];
    for chunk in chunks {
        for (m, part) in merged.iter_mut().zip(chunk) {
            m.extend(part);
        }
    }
    Ok(merged)
}
