//! Diagonal-plus-low-rank covariance algebra.
//!
//! A [`StructuredCovariance`] is `D + Σⱼ wⱼ UⱼUⱼ'` with `D` diagonal and each
//! `Uⱼ` an `n × kⱼ` factor. Inverse application and the log-determinant are
//! obtained by peeling the terms one at a time with the Woodbury identity and
//! the matrix determinant lemma, in the order the terms were given:
//!
//! ```text
//! Σⱼ⁻¹ = Σⱼ₋₁⁻¹ − wⱼ Σⱼ₋₁⁻¹Uⱼ (I + wⱼ Uⱼ'Σⱼ₋₁⁻¹Uⱼ)⁻¹ Uⱼ'Σⱼ₋₁⁻¹
//! |Σⱼ|  = |Σⱼ₋₁| · |I + wⱼ Uⱼ'Σⱼ₋₁⁻¹Uⱼ|
//! ```
//!
//! Only the `kⱼ × kⱼ` capacitance matrices are factored densely; nothing of
//! size `n × n` is ever formed except by [`StructuredCovariance::materialize`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

/// Capacitance blocks with a reciprocal condition number below this are
/// treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-13;

/// Largest dimension [`StructuredCovariance::materialize`] will allocate.
pub const MATERIALIZE_LIMIT: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowRankError {
    #[error("diagonal entry {index} is {value}; must be finite and > 0")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("term `{label}`: factor has {rows} rows, expected {n}")]
    FactorShape { label: String, rows: usize, n: usize },
    #[error("term `{label}`: weight {weight} must be finite and >= 0")]
    InvalidWeight { label: String, weight: f64 },
    #[error("term `{label}`: factor contains non-finite entries")]
    NonFiniteFactor { label: String },
    #[error("capacitance block `{block}` is numerically singular (rcond {rcond:.3e})")]
    Singular { block: String, rcond: f64 },
    #[error("capacitance block `{block}` is not positive definite")]
    NotPositiveDefinite { block: String },
    #[error("vector has length {got}, covariance dimension is {n}")]
    Dimension { got: usize, n: usize },
    #[error("dimension {n} exceeds the dense materialization limit {MATERIALIZE_LIMIT}")]
    TooLarge { n: usize },
}

/// One `w · UU'` correction.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTerm {
    pub label: String,
    pub factor: DMatrix<f64>,
    pub weight: f64,
}

impl LowRankTerm {
    pub fn new(label: impl Into<String>, factor: DMatrix<f64>, weight: f64) -> Self {
        Self {
            label: label.into(),
            factor,
            weight,
        }
    }

    fn is_active(&self) -> bool {
        self.weight > 0.0 && self.factor.ncols() > 0
    }
}

#[derive(Debug, Clone)]
struct Level {
    term: usize,
    /// Σⱼ₋₁⁻¹ Uⱼ
    inv_factor: DMatrix<f64>,
    capacitance: Cholesky<f64, Dyn>,
    log_det: f64,
}

#[derive(Debug, Clone)]
pub struct StructuredCovariance {
    diag: DVector<f64>,
    terms: Vec<LowRankTerm>,
    levels: Vec<Level>,
    log_det: f64,
}

impl StructuredCovariance {
    /// Builds and factors `diag + Σ wⱼ UⱼUⱼ'`.
    pub fn new(diag: DVector<f64>, terms: Vec<LowRankTerm>) -> Result<Self, LowRankError> {
        let n = diag.len();
        if let Some((index, &value)) = diag
            .iter()
            .enumerate()
            .find(|(_, d)| !(d.is_finite() && **d > 0.0))
        {
            return Err(LowRankError::NonPositiveDiagonal { index, value });
        }
        for t in &terms {
            if t.factor.nrows() != n && t.factor.ncols() > 0 {
                return Err(LowRankError::FactorShape {
                    label: t.label.clone(),
                    rows: t.factor.nrows(),
                    n,
                });
            }
            if !(t.weight.is_finite() && t.weight >= 0.0) {
                return Err(LowRankError::InvalidWeight {
                    label: t.label.clone(),
                    weight: t.weight,
                });
            }
            if t.factor.iter().any(|x| !x.is_finite()) {
                return Err(LowRankError::NonFiniteFactor {
                    label: t.label.clone(),
                });
            }
        }

        let mut cov = Self {
            log_det: diag.iter().map(|d| d.ln()).sum(),
            diag,
            terms,
            levels: Vec::new(),
        };
        for j in 0..cov.terms.len() {
            if !cov.terms[j].is_active() {
                continue;
            }
            let term = &cov.terms[j];
            let inv_factor = cov.solve_columns(&term.factor);
            let k = term.factor.ncols();
            let mut cap = term.factor.transpose() * &inv_factor * term.weight;
            for i in 0..k {
                cap[(i, i)] += 1.0;
            }
            let cap = (&cap + cap.transpose()) * 0.5;
            let capacitance = factor_capacitance(cap, &term.label)?;
            let log_det = 2.0 * capacitance.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            cov.log_det += log_det;
            cov.levels.push(Level {
                term: j,
                inv_factor,
                capacitance,
                log_det,
            });
        }
        Ok(cov)
    }

    /// Pure diagonal covariance.
    pub fn diagonal(diag: DVector<f64>) -> Result<Self, LowRankError> {
        Self::new(diag, Vec::new())
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn terms(&self) -> &[LowRankTerm] {
        &self.terms
    }

    /// Same structure with the diagonal and every weight multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self, LowRankError> {
        let terms = self
            .terms
            .iter()
            .map(|t| LowRankTerm::new(t.label.clone(), t.factor.clone(), t.weight * k))
            .collect();
        Self::new(&self.diag * k, terms)
    }

    /// Σ⁻¹v.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>, LowRankError> {
        self.check_len(v.len())?;
        let mut x = v.component_div(&self.diag);
        self.apply_levels(&mut x, self.levels.len());
        Ok(x)
    }

    /// Σ⁻¹M, column by column.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>, LowRankError> {
        self.check_len(m.nrows())?;
        Ok(self.solve_columns(m))
    }

    /// log|Σ|.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Per-block log-determinant contributions: `("diagonal", log|D|)` then one
    /// entry per active low-rank term.
    pub fn log_det_parts(&self) -> Vec<(String, f64)> {
        let mut parts = vec![(
            "diagonal".to_string(),
            self.diag.iter().map(|d| d.ln()).sum(),
        )];
        parts.extend(
            self.levels
                .iter()
                .map(|l| (self.terms[l.term].label.clone(), l.log_det)),
        );
        parts
    }

    /// v'Σ⁻¹v.
    pub fn quad_form(&self, v: &DVector<f64>) -> Result<f64, LowRankError> {
        Ok(v.dot(&self.solve(v)?))
    }

    /// Σv without forming Σ.
    pub fn mul_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>, LowRankError> {
        self.check_len(v.len())?;
        let mut out = self.diag.component_mul(v);
        for t in self.terms.iter().filter(|t| t.is_active()) {
            let proj = t.factor.tr_mul(v);
            out.gemv(t.weight, &t.factor, &proj, 1.0);
        }
        Ok(out)
    }

    /// tr(Σ).
    pub fn trace(&self) -> f64 {
        self.diag.sum()
            + self
                .terms
                .iter()
                .map(|t| t.weight * t.factor.norm_squared())
                .sum::<f64>()
    }

    /// Diagonal of the full matrix.
    pub fn full_diagonal(&self) -> DVector<f64> {
        let mut d = self.diag.clone();
        for t in &self.terms {
            for (i, row) in t.factor.row_iter().enumerate() {
                d[i] += t.weight * row.norm_squared();
            }
        }
        d
    }

    /// Dense `n × n` matrix.
    pub fn materialize(&self) -> Result<DMatrix<f64>, LowRankError> {
        let n = self.n();
        if n > MATERIALIZE_LIMIT {
            return Err(LowRankError::TooLarge { n });
        }
        let mut m = DMatrix::from_diagonal(&self.diag);
        for t in self.terms.iter().filter(|t| t.is_active()) {
            m.gemm(t.weight, &t.factor, &t.factor.transpose(), 1.0);
        }
        Ok((&m + m.transpose()) * 0.5)
    }

    /// A factor `L = [D^½ | √w₁U₁ | √w₂U₂ | …]` with `LL' = Σ`. Returned as the
    /// diagonal part and the stacked low-rank columns.
    pub fn sampling_factor(&self) -> (DVector<f64>, DMatrix<f64>) {
        let sqrt_diag = self.diag.map(f64::sqrt);
        let active: Vec<&LowRankTerm> = self.terms.iter().filter(|t| t.is_active()).collect();
        let width = active.iter().map(|t| t.factor.ncols()).sum();
        let mut stacked = DMatrix::zeros(self.n(), width);
        let mut col = 0;
        for t in active {
            let k = t.factor.ncols();
            stacked
                .columns_mut(col, k)
                .copy_from(&(&t.factor * t.weight.sqrt()));
            col += k;
        }
        (sqrt_diag, stacked)
    }

    fn check_len(&self, got: usize) -> Result<(), LowRankError> {
        if got == self.n() {
            Ok(())
        } else {
            Err(LowRankError::Dimension { got, n: self.n() })
        }
    }

    fn solve_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            col.component_div_assign(&self.diag);
        }
        for mut col in out.column_iter_mut() {
            let mut x = col.clone_owned();
            self.apply_levels(&mut x, self.levels.len());
            col.copy_from(&x);
        }
        out
    }

    /// Applies the Woodbury corrections of the first `upto` levels to `x`,
    /// which must already hold D⁻¹v.
    fn apply_levels(&self, x: &mut DVector<f64>, upto: usize) {
        for level in &self.levels[..upto] {
            let t = &self.terms[level.term];
            let proj = t.factor.tr_mul(x);
            let inner = level.capacitance.solve(&proj);
            x.gemv(-t.weight, &level.inv_factor, &inner, 1.0);
        }
    }
}

/// A factor with at most `nrows` columns and the same outer product `UU'`.
/// Wide factors make the capacitance blocks larger than the matrix itself.
pub fn compress_factor(u: &DMatrix<f64>) -> DMatrix<f64> {
    if u.ncols() <= u.nrows() {
        return u.clone();
    }
    let gram = u * u.transpose();
    let eig = SymmetricEigen::new((&gram + gram.transpose()) * 0.5);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 0.0)
        .collect();
    let mut out = DMatrix::zeros(u.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()));
    }
    out
}

fn factor_capacitance(cap: DMatrix<f64>, block: &str) -> Result<Cholesky<f64, Dyn>, LowRankError> {
    let eig = SymmetricEigen::new(cap.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > 0.0) || lo < -RCOND_THRESHOLD * hi {
        return Err(LowRankError::NotPositiveDefinite {
            block: block.to_string(),
        });
    }
    let rcond = lo / hi;
    if !(rcond >= RCOND_THRESHOLD) {
        return Err(LowRankError::Singular {
            block: block.to_string(),
            rcond: rcond.max(0.0),
        });
    }
    Cholesky::new(cap).ok_or_else(|| LowRankError::NotPositiveDefinite {
        block: block.to_string(),
    })
}
