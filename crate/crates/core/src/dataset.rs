//! Observation vector, run ensembles, and their on-disk format.
//!
//! A dataset is described by a JSON manifest pointing at headerless CSV
//! matrices. Rows are flattened space-time cells in region-major order
//! (`row = region * n_periods + period`), columns are runs. The observation
//! file is a single column.
//!
//! ```json
//! {
//!   "n_regions": 6, "n_periods": 9,
//!   "observation": "obs.csv",
//!   "factual": "hist.csv",
//!   "counterfactual": { "ANT": "nat.csv" },
//!   "individual": { "NAT": "nat.csv", "ANT": "ant.csv" },
//!   "control": "ctl.csv",
//!   "reference_periods": [0]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Role keys may
//! also be written flat, as `"counterfactual:ANT"` or `"individual:ANT"`.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("unknown role name `{0}` in manifest")]
    UnknownRole(String),
    #[error("{path}: {detail}")]
    Csv { path: PathBuf, detail: String },
    #[error("{path}: non-numeric cell `{value}` at row {row}, column {col}")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },
    #[error("{context}: non-finite value at row {row}, column {col}")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("ensemble `{0}` has no runs")]
    EmptyEnsemble(String),
    #[error("reference period set is empty")]
    EmptyReference,
    #[error("reference period {index} out of range (n_periods = {n_periods})")]
    ReferenceOutOfRange { index: usize, n_periods: usize },
    #[error("dataset has no individual-forcing ensembles")]
    NoForcings,
    #[error("counterfactual declared for `{0}`, which has no individual ensemble")]
    OrphanCounterfactual(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeLayout {
    pub n_regions: usize,
    pub n_periods: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub region_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub period_labels: Vec<String>,
}

impl SpaceTimeLayout {
    pub fn new(n_regions: usize, n_periods: usize) -> Result<Self, DataError> {
        Self::with_labels(n_regions, n_periods, Vec::new(), Vec::new())
    }

    pub fn with_labels(
        n_regions: usize,
        n_periods: usize,
        region_labels: Vec<String>,
        period_labels: Vec<String>,
    ) -> Result<Self, DataError> {
        if n_regions == 0 || n_periods == 0 {
            return Err(DataError::InvalidLayout(format!(
                "{n_regions} regions x {n_periods} periods"
            )));
        }
        if !region_labels.is_empty() && region_labels.len() != n_regions {
            return Err(DataError::InvalidLayout(format!(
                "{} region labels for {n_regions} regions",
                region_labels.len()
            )));
        }
        if !period_labels.is_empty() && period_labels.len() != n_periods {
            return Err(DataError::InvalidLayout(format!(
                "{} period labels for {n_periods} periods",
                period_labels.len()
            )));
        }
        Ok(Self {
            n_regions,
            n_periods,
            region_labels,
            period_labels,
        })
    }

    /// Flattened state dimension.
    pub fn n(&self) -> usize {
        self.n_regions * self.n_periods
    }

    pub fn cell(&self, region: usize, period: usize) -> usize {
        region * self.n_periods + period
    }
}

/// A set of model runs sharing one experimental design.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    name: String,
    runs: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(name: impl Into<String>, runs: DMatrix<f64>) -> Result<Self, DataError> {
        let name = name.into();
        if runs.ncols() == 0 || runs.nrows() == 0 {
            return Err(DataError::EmptyEnsemble(name));
        }
        check_finite(&runs, &name)?;
        Ok(Self { name, runs })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn runs(&self) -> &DMatrix<f64> {
        &self.runs
    }

    pub fn n(&self) -> usize {
        self.runs.nrows()
    }

    /// Run count.
    pub fn r(&self) -> usize {
        self.runs.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        ensemble_mean(self)
    }
}

/// Arithmetic mean across runs.
pub fn ensemble_mean(e: &Ensemble) -> DVector<f64> {
    let runs = e.runs();
    let mut acc = DVector::zeros(runs.nrows());
    for col in runs.column_iter() {
        acc += col;
    }
    acc / runs.ncols() as f64
}

/// Subtracts, per region and per column, the mean over `reference_periods`.
pub fn to_anomalies(
    runs: &DMatrix<f64>,
    layout: &SpaceTimeLayout,
    reference_periods: &[usize],
) -> Result<DMatrix<f64>, DataError> {
    if reference_periods.is_empty() {
        return Err(DataError::EmptyReference);
    }
    if let Some(&index) = reference_periods.iter().find(|&&t| t >= layout.n_periods) {
        return Err(DataError::ReferenceOutOfRange {
            index,
            n_periods: layout.n_periods,
        });
    }
    if runs.nrows() != layout.n() {
        return Err(DataError::DimensionMismatch(format!(
            "matrix has {} rows, layout expects {}",
            runs.nrows(),
            layout.n()
        )));
    }
    let mut out = runs.clone();
    let k = reference_periods.len() as f64;
    for c in 0..runs.ncols() {
        for g in 0..layout.n_regions {
            let base: f64 = reference_periods
                .iter()
                .map(|&t| runs[(layout.cell(g, t), c)])
                .sum::<f64>()
                / k;
            for t in 0..layout.n_periods {
                out[(layout.cell(g, t), c)] -= base;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub layout: SpaceTimeLayout,
    pub factual: Ensemble,
    /// Counterfactual ("all forcings except f") ensembles keyed by forcing.
    pub counterfactual: IndexMap<String, Option<Ensemble>>,
    /// Individual-forcing ensembles, in declaration order.
    pub individual: Vec<Ensemble>,
    pub control: Ensemble,
}

impl Dataset {
    pub fn new(
        y: DVector<f64>,
        layout: SpaceTimeLayout,
        factual: Ensemble,
        counterfactual: IndexMap<String, Option<Ensemble>>,
        individual: Vec<Ensemble>,
        control: Ensemble,
    ) -> Result<Self, DataError> {
        let n = layout.n();
        if y.len() != n {
            return Err(DataError::DimensionMismatch(format!(
                "observation has length {}, layout expects {n}",
                y.len()
            )));
        }
        check_finite(&DMatrix::from_column_slice(n, 1, y.as_slice()), "observation")?;
        if individual.is_empty() {
            return Err(DataError::NoForcings);
        }
        let all = std::iter::once(&factual)
            .chain(individual.iter())
            .chain(counterfactual.values().flatten())
            .chain(std::iter::once(&control));
        for e in all {
            if e.n() != n {
                return Err(DataError::DimensionMismatch(format!(
                    "ensemble `{}` has {} rows, observation has {n}",
                    e.name(),
                    e.n()
                )));
            }
        }
        for f in counterfactual.keys() {
            if !individual.iter().any(|e| e.name() == f) {
                return Err(DataError::OrphanCounterfactual(f.clone()));
            }
        }
        Ok(Self {
            y,
            layout,
            factual,
            counterfactual,
            individual,
            control,
        })
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    /// Number of individual forcings.
    pub fn p(&self) -> usize {
        self.individual.len()
    }

    pub fn forcing_index(&self, forcing: &str) -> Option<usize> {
        self.individual.iter().position(|e| e.name() == forcing)
    }

    pub fn counterfactual_for(&self, forcing: &str) -> Option<&Ensemble> {
        self.counterfactual.get(forcing).and_then(Option::as_ref)
    }
}

/// Manifest document as written on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub n_regions: usize,
    pub n_periods: usize,
    pub observation: PathBuf,
    pub factual: PathBuf,
    #[serde(default)]
    pub counterfactual: IndexMap<String, Option<PathBuf>>,
    pub individual: IndexMap<String, PathBuf>,
    pub control: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_periods: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub region_labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub period_labels: Vec<String>,
}

const KNOWN_KEYS: [&str; 10] = [
    "n_regions",
    "n_periods",
    "observation",
    "factual",
    "counterfactual",
    "individual",
    "control",
    "reference_periods",
    "region_labels",
    "period_labels",
];

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = read_to_string(path)?;
        let bad = |detail: String| DataError::Manifest {
            path: path.to_path_buf(),
            detail,
        };
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let serde_json::Value::Object(obj) = value else {
            return Err(bad("top level is not an object".into()));
        };

        // Fold flat `counterfactual:<f>` / `individual:<f>` keys into the
        // nested objects before typed deserialization.
        let mut nested = serde_json::Map::new();
        let mut flat_cf = serde_json::Map::new();
        let mut flat_ind = serde_json::Map::new();
        for (key, v) in obj {
            if let Some(f) = key.strip_prefix("counterfactual:") {
                flat_cf.insert(f.to_string(), v);
            } else if let Some(f) = key.strip_prefix("individual:") {
                flat_ind.insert(f.to_string(), v);
            } else if KNOWN_KEYS.contains(&key.as_str()) {
                nested.insert(key, v);
            } else {
                return Err(DataError::UnknownRole(key));
            }
        }
        for (key, flat) in [("counterfactual", flat_cf), ("individual", flat_ind)] {
            if flat.is_empty() {
                continue;
            }
            let entry = nested
                .entry(key)
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            match entry {
                serde_json::Value::Object(m) => m.extend(flat),
                _ => return Err(bad(format!("`{key}` must be an object"))),
            }
        }
        serde_json::from_value(serde_json::Value::Object(nested)).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Reads and validates a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let layout = SpaceTimeLayout::with_labels(
        manifest.n_regions,
        manifest.n_periods,
        manifest.region_labels.clone(),
        manifest.period_labels.clone(),
    )?;
    let n = layout.n();

    let anomalies = |m: DMatrix<f64>| -> Result<DMatrix<f64>, DataError> {
        match &manifest.reference_periods {
            Some(refs) => to_anomalies(&m, &layout, refs),
            None => Ok(m),
        }
    };
    let load = |name: &str, p: &Path| -> Result<Ensemble, DataError> {
        let path = resolve(p);
        let m = read_matrix(&path)?;
        if m.nrows() != n {
            return Err(DataError::DimensionMismatch(format!(
                "{} has {} rows, layout expects {n}",
                path.display(),
                m.nrows()
            )));
        }
        Ensemble::new(name, anomalies(m)?)
    };

    let obs_path = resolve(&manifest.observation);
    let obs = read_matrix(&obs_path)?;
    if obs.ncols() != 1 {
        return Err(DataError::DimensionMismatch(format!(
            "{} must be a single column, found {}",
            obs_path.display(),
            obs.ncols()
        )));
    }
    if obs.nrows() != n {
        return Err(DataError::DimensionMismatch(format!(
            "{} has {} rows, layout expects {n}",
            obs_path.display(),
            obs.nrows()
        )));
    }
    let y = anomalies(obs)?.column(0).into_owned();

    let factual = load("factual", &manifest.factual)?;
    let individual = manifest
        .individual
        .iter()
        .map(|(f, p)| load(f, p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut counterfactual = IndexMap::new();
    for (f, p) in &manifest.counterfactual {
        let e = p.as_deref().map(|p| load(f, p)).transpose()?;
        counterfactual.insert(f.clone(), e);
    }
    let control = load("control", &manifest.control)?;

    Dataset::new(y, layout, factual, counterfactual, individual, control)
}

/// Writes `dataset` as CSV files plus `manifest.json` under `dir`; returns the
/// manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let put = |file: String, m: &DMatrix<f64>| -> Result<PathBuf, DataError> {
        write_matrix(&dir.join(&file), m)?;
        Ok(PathBuf::from(file))
    };
    let y = DMatrix::from_column_slice(dataset.n(), 1, dataset.y.as_slice());
    let manifest = Manifest {
        n_regions: dataset.layout.n_regions,
        n_periods: dataset.layout.n_periods,
        observation: put("observation.csv".into(), &y)?,
        factual: put("factual.csv".into(), dataset.factual.runs())?,
        counterfactual: dataset
            .counterfactual
            .iter()
            .map(|(f, e)| {
                let p = e
                    .as_ref()
                    .map(|e| put(format!("counterfactual_{}.csv", file_stem(f)), e.runs()))
                    .transpose()?;
                Ok((f.clone(), p))
            })
            .collect::<Result<_, DataError>>()?,
        individual: dataset
            .individual
            .iter()
            .map(|e| {
                let p = put(format!("individual_{}.csv", file_stem(e.name())), e.runs())?;
                Ok((e.name().to_string(), p))
            })
            .collect::<Result<_, DataError>>()?,
        control: put("control.csv".into(), dataset.control.runs())?,
        reference_periods: None,
        region_labels: dataset.layout.region_labels.clone(),
        period_labels: dataset.layout.period_labels.clone(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a headerless CSV of decimal numbers into a matrix.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>, DataError> {
    let text = read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                    path: path.to_path_buf(),
                    row: i,
                    col: j,
                    value: cell.to_string(),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(DataError::NonFinite {
                        context: path.display().to_string(),
                        row: i,
                        col: j,
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Csv {
            path: path.to_path_buf(),
            detail: "no rows".into(),
        });
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<(), DataError> {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 12);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&m[(i, j)].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_finite(m: &DMatrix<f64>, context: &str) -> Result<(), DataError> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(DataError::NonFinite {
                    context: context.to_string(),
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}
