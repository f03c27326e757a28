//! Derivative-free maximizers: box-clamped Nelder–Mead and golden-section search.

/// Settings for [`nelder_mead_max`].
#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Edge length of the initial simplex along each axis.
    pub initial_step: f64,
    /// Stop when `|f_best − f_worst| ≤ f_rel_tol · max(|f_best|, 1e-300)`.
    pub f_rel_tol: f64,
    /// ... and every vertex is within this distance of the best one.
    pub x_tol: f64,
    pub max_evals: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Maximizes `f` starting from `x0`. Trial points are clamped into the box
/// before evaluation; `NaN` is treated as `−∞`. After a converged run the
/// simplex is rebuilt around the best point and the search restarted until a
/// restart no longer improves the value.
pub fn nelder_mead_max<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), opts.lower.len());
    assert_eq!(x0.len(), opts.upper.len());
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };

    let mut start = x0.to_vec();
    clamp_into(&mut start, &opts.lower, &opts.upper);
    let mut best_val = eval(&start, &mut evals);
    let mut best_x = start.clone();
    let mut converged;

    loop {
        let run = simplex_run(&mut eval, &best_x, best_val, opts, &mut evals);
        let gain = run.1 - best_val;
        let improved = gain > 0.0
            && (best_val == f64::NEG_INFINITY || gain > opts.f_rel_tol * best_val.abs().max(1e-300));
        if run.1 >= best_val {
            best_x = run.0;
            best_val = run.1;
        }
        converged = run.2;
        if !converged || !improved || evals >= opts.max_evals {
            break;
        }
    }
    NelderMeadResult {
        x: best_x,
        value: best_val,
        evals,
        converged,
    }
}

fn simplex_run<E>(
    eval: &mut E,
    x0: &[f64],
    f0: f64,
    opts: &NelderMeadOptions,
    evals: &mut usize,
) -> (Vec<f64>, f64, bool)
where
    E: FnMut(&[f64], &mut usize) -> f64,
{
    let d = x0.len();
    let mut pts: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    pts.push((x0.to_vec(), f0));
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        if x[i] > opts.upper[i] {
            x[i] = x0[i] - opts.initial_step;
        }
        clamp_into(&mut x, &opts.lower, &opts.upper);
        let v = eval(&x, evals);
        pts.push((x, v));
    }

    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        let mut x: Vec<f64> = a.iter().zip(b).map(|(a, b)| a + t * (b - a)).collect();
        clamp_into(&mut x, &opts.lower, &opts.upper);
        x
    };

    while *evals < opts.max_evals {
        // Descending by value: pts[0] best, pts[d] worst.
        pts.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (fb, fw) = (pts[0].1, pts[d].1);
        let spread = pts[1..]
            .iter()
            .map(|(x, _)| {
                x.iter()
                    .zip(&pts[0].0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        let f_ok = fb.is_finite() && (fb - fw).abs() <= opts.f_rel_tol * fb.abs().max(1e-300);
        if f_ok && spread <= opts.x_tol {
            return (pts[0].0.clone(), fb, true);
        }

        let mut centroid = vec![0.0; d];
        for (x, _) in &pts[..d] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / d as f64;
            }
        }
        let worst = pts[d].0.clone();
        let xr = combine(&centroid, &worst, -1.0);
        let fr = eval(&xr, evals);
        if fr > fb {
            let xe = combine(&centroid, &worst, -2.0);
            let fe = eval(&xe, evals);
            pts[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > pts[d - 1].1 {
            pts[d] = (xr, fr);
        } else {
            let outside = fr > fw;
            let xc = if outside {
                combine(&centroid, &xr, 0.5)
            } else {
                combine(&centroid, &worst, 0.5)
            };
            let fc = eval(&xc, evals);
            let accept = if outside { fc >= fr } else { fc > fw };
            if accept {
                pts[d] = (xc, fc);
            } else {
                let best = pts[0].0.clone();
                for p in pts.iter_mut().skip(1) {
                    let x = combine(&best, &p.0, 0.5);
                    let v = eval(&x, evals);
                    *p = (x, v);
                }
            }
        }
    }
    pts.sort_by(|a, b| b.1.total_cmp(&a.1));
    (pts[0].0.clone(), pts[0].1, false)
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section maximization of a unimodal `f` on `[lo, hi]`, stopping when
/// the bracket is narrower than `tol`. Returns `(x, f(x))`.
pub fn golden_section_max<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = sanitize(f(x1));
    let mut f2 = sanitize(f(x2));
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = sanitize(f(x1));
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = sanitize(f(x2));
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(d: usize, lo: f64, hi: f64) -> NelderMeadOptions {
        NelderMeadOptions {
            initial_step: 0.5,
            f_rel_tol: 1e-12,
            x_tol: 1e-8,
            max_evals: 20_000,
            lower: vec![lo; d],
            upper: vec![hi; d],
        }
    }

    #[test]
    fn finds_rosenbrock_peak() {
        let f = |x: &[f64]| -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)) - 1.0;
        let r = nelder_mead_max(f, &[-1.2, 1.0], &opts(2, -10.0, 10.0));
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
    }

    #[test]
    fn respects_box() {
        let f = |x: &[f64]| -(x[0] - 5.0).powi(2) - (x[1] + 5.0).powi(2);
        let r = nelder_mead_max(f, &[0.0, 0.0], &opts(2, -1.0, 1.0));
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        assert!((r.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn retreats_from_infeasible_region() {
        let f = |x: &[f64]| {
            if x[0] < 0.0 {
                f64::NEG_INFINITY
            } else {
                -(x[0] - 0.3).powi(2) - x[1] * x[1]
            }
        };
        let r = nelder_mead_max(f, &[2.0, 1.0], &opts(2, -5.0, 5.0));
        assert!((r.x[0] - 0.3).abs() < 1e-5);
        assert!(r.value.is_finite());
    }

    #[test]
    fn golden_section_quadratic() {
        let (x, v) = golden_section_max(|x| -(x - 0.37).powi(2), 0.0, 1.0, 1e-10);
        assert!((x - 0.37).abs() < 1e-8);
        assert!(v <= 0.0);
    }

    #[test]
    fn golden_section_edge_maximum() {
        let (x, _) = golden_section_max(|x| x, 0.0, 1.0, 1e-9);
        assert!(x > 1.0 - 1e-8);
    }
}
