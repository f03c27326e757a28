use serde::Serialize;
use super::sampling::MIN_SAMPLES;
use super::{std_normal_cdf, CausalError};

pub const GRID_POINTS: usize = 2048;
/// Kernel support in bandwidths; `Φ(±8)` is within 1e-15 of 0 and 1.
const KERNEL_REACH: f64 = 8.0;

/// Kernel-smoothed CDF tabulated on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub sample_count: usize,
}

impl CdfEstimate {
    /// Linear interpolation; 0 below the grid and 1 above it.
    pub fn eval(&self, u: f64) -> f64 {
        let g = &self.grid;
        if u < g[0] {
            return 0.0;
        }
        if u >= g[g.len() - 1] {
            return 1.0;
        }
        let step = (g[g.len() - 1] - g[0]) / (g.len() - 1) as f64;
        let i = (((u - g[0]) / step) as usize).min(g.len() - 2);
        let t = ((u - g[i]) / (g[i + 1] - g[i])).clamp(0.0, 1.0);
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Gaussian-kernel CDF with Silverman's bandwidth
/// `h = 0.9·min(sd, IQR/1.34)·N^(−1/5)` on `GRID_POINTS` points spanning
/// `[min − 4h, max + 4h]`. Samples are linearly binned onto the grid and the
/// binned weights convolved with the tabulated kernel CDF.
pub fn kernel_cdf(samples: &[f64]) -> Result<CdfEstimate, CausalError> {
    let n = samples.len();
    if n < MIN_SAMPLES {
        return Err(CausalError::TooFewSamples { got: n, min: MIN_SAMPLES });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(CausalError::NonFiniteSample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let scale = sorted[0].abs().max(sorted[n - 1].abs());
    if !(sd > 1e-12 * scale) {
        return Err(CausalError::DegenerateSample { sd });
    }
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);

    let lo = sorted[0] - 4.0 * h;
    let hi = sorted[n - 1] + 4.0 * h;
    let m = GRID_POINTS;
    let step = (hi - lo) / (m - 1) as f64;
    let grid: Vec<f64> = (0..m).map(|i| lo + step * i as f64).collect();

    let mut weights = vec![0.0; m];
    let unit = 1.0 / n as f64;
    for &x in samples {
        let pos = ((x - lo) / step).clamp(0.0, (m - 1) as f64);
        let j = (pos.floor() as usize).min(m - 2);
        let frac = pos - j as f64;
        weights[j] += unit * (1.0 - frac);
        weights[j + 1] += unit * frac;
    }

    let reach = ((KERNEL_REACH * h / step).ceil() as usize).min(m);
    // kernel[reach + k] = Φ(k·step/h), k ∈ [−reach, reach].
    let kernel: Vec<f64> = (0..=2 * reach)
        .map(|i| std_normal_cdf((i as f64 - reach as f64) * step / h))
        .collect();
    // below[i] = Σ_{j < i} weights[j]
    let mut below = vec![0.0; m + 1];
    for j in 0..m {
        below[j + 1] = below[j] + weights[j];
    }

    let mut values = Vec::with_capacity(m);
    let mut running = 0.0f64;
    for i in 0..m {
        let start = i.saturating_sub(reach);
        let end = (i + reach).min(m - 1);
        let mut v = below[start];
        for (j, w) in weights.iter().enumerate().take(end + 1).skip(start) {
            v += w * kernel[reach + i - j];
        }
        running = running.max(v.clamp(0.0, 1.0));
        values.push(running);
    }
    Ok(CdfEstimate {
        grid,
        values,
        bandwidth: h,
        sample_count: n,
    })
}
