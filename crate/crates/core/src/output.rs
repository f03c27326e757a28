//! Output files and their readers.
//!
//! | file | columns |
//! |------|---------|
//! | `curves*.csv` | `u,G,G_bar,PN,PS,PNS` |
//! | `inflation.csv` | `factor,pns_total,pns_global,pns_pattern` |
//! | `eigen.csv` | `rank,eigenvalue,projection,coefficient,signal_to_noise` |
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! gives the exact values. Empty cells stand for undefined values. JSON files
//! are pretty-printed with a trailing newline.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::causal::Curves;
use crate::sensitivity::{InflationScan, ScanMode, SpectrumRow};
use crate::Error;

pub const CURVES_HEADER: [&str; 6] = ["u", "G", "G_bar", "PN", "PS", "PNS"];
pub const SCAN_HEADER: [&str; 4] = ["factor", "pns_total", "pns_global", "pns_pattern"];
pub const EIGEN_HEADER: [&str; 5] = ["rank", "eigenvalue", "projection", "coefficient", "signal_to_noise"];

fn write_err(path: &Path, e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Error {
    Error::Write {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn parse_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Parse {
        what: path.display().to_string(),
        detail: detail.to_string(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record(header).map_err(|e| write_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<Option<f64>>>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| parse_err(path, e))?;
    let got: Vec<String> = r
        .headers()
        .map_err(|e| parse_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != header {
        return Err(parse_err(path, format!("header {got:?}, expected {header:?}")));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| parse_err(path, e))?;
            rec.iter()
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>()
                            .map(Some)
                            .map_err(|_| parse_err(path, format!("row {}: `{c}` is not a number", i + 1)))
                    }
                })
                .collect()
        })
        .collect()
}

fn required(path: &Path, v: Option<f64>, col: &str) -> Result<f64, Error> {
    v.ok_or_else(|| parse_err(path, format!("missing value in column {col}")))
}

pub fn write_curves(path: &Path, c: &Curves) -> Result<(), Error> {
    let rows = (0..c.len()).map(|i| {
        vec![
            c.u[i].to_string(),
            c.g[i].to_string(),
            c.g_bar[i].to_string(),
            cell(c.pn[i]),
            cell(c.ps[i]),
            c.pns[i].to_string(),
        ]
    });
    write_rows(path, &CURVES_HEADER, rows)
}

pub fn read_curves(path: &Path) -> Result<Curves, Error> {
    let rows = read_rows(path, &CURVES_HEADER)?;
    let mut c = Curves {
        u: Vec::with_capacity(rows.len()),
        g: Vec::with_capacity(rows.len()),
        g_bar: Vec::with_capacity(rows.len()),
        pn: Vec::with_capacity(rows.len()),
        ps: Vec::with_capacity(rows.len()),
        pns: Vec::with_capacity(rows.len()),
    };
    for r in rows {
        c.u.push(required(path, r[0], "u")?);
        c.g.push(required(path, r[1], "G")?);
        c.g_bar.push(required(path, r[2], "G_bar")?);
        c.pn.push(r[3]);
        c.ps.push(r[4]);
        c.pns.push(required(path, r[5], "PNS")?);
    }
    Ok(c)
}

pub fn write_scan(path: &Path, s: &InflationScan) -> Result<(), Error> {
    let rows = (0..s.factors.len()).map(|i| {
        vec![
            s.factors[i].to_string(),
            s.pns_total[i].to_string(),
            cell(s.pns_global[i]),
            cell(s.pns_pattern[i]),
        ]
    });
    write_rows(path, &SCAN_HEADER, rows)
}

/// Reads a scan file; the mode is not stored and must be supplied.
pub fn read_scan(path: &Path, mode: ScanMode) -> Result<InflationScan, Error> {
    let rows = read_rows(path, &SCAN_HEADER)?;
    let mut s = InflationScan {
        mode,
        factors: vec![],
        pns_total: vec![],
        pns_global: vec![],
        pns_pattern: vec![],
    };
    for r in rows {
        s.factors.push(required(path, r[0], "factor")?);
        s.pns_total.push(required(path, r[1], "pns_total")?);
        s.pns_global.push(r[2]);
        s.pns_pattern.push(r[3]);
    }
    Ok(s)
}

pub fn write_spectrum(path: &Path, rows: &[SpectrumRow]) -> Result<(), Error> {
    let rows = rows.iter().map(|r| {
        vec![
            r.rank.to_string(),
            r.eigenvalue.to_string(),
            r.projection.to_string(),
            r.coefficient.to_string(),
            r.signal_to_noise.to_string(),
        ]
    });
    write_rows(path, &EIGEN_HEADER, rows)
}

pub fn read_spectrum(path: &Path) -> Result<Vec<SpectrumRow>, Error> {
    read_rows(path, &EIGEN_HEADER)?
        .into_iter()
        .map(|r| {
            let rank = required(path, r[0], "rank")?;
            if rank.fract() != 0.0 || rank < 1.0 {
                return Err(parse_err(path, format!("rank {rank} is not a positive integer")));
            }
            Ok(SpectrumRow {
                rank: rank as usize,
                eigenvalue: required(path, r[1], "eigenvalue")?,
                projection: required(path, r[2], "projection")?,
                coefficient: required(path, r[3], "coefficient")?,
                signal_to_noise: required(path, r[4], "signal_to_noise")?,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    fs::write(path, text + "\n").map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json(path: &Path) -> Result<serde_json::Value, Error> {
    let text = fs::read_to_string(path).map_err(|e| parse_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_round_trip() {
        let c = Curves {
            u: vec![-1.0, 0.1 + 0.2, 2.5e-300],
            g: vec![0.0, 0.5, 1.0],
            g_bar: vec![0.1, 0.9, 1.0],
            pn: vec![Some(0.1), None, Some(1.0 / 3.0)],
            ps: vec![None, Some(0.7), Some(0.0)],
            pns: vec![0.1, 0.4, 0.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curves.csv");
        write_curves(&p, &c).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("u,G,G_bar,PN,PS,PNS\n"));
        assert_eq!(read_curves(&p).unwrap(), c);
    }

    #[test]
    fn scan_and_spectrum_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = InflationScan {
            mode: ScanMode::Inflation,
            factors: vec![1.0, 2.4],
            pns_total: vec![0.9999, 0.95],
            pns_global: vec![Some(0.97), Some(0.9)],
            pns_pattern: vec![None, None],
        };
        let p = dir.path().join("inflation.csv");
        write_scan(&p, &s).unwrap();
        assert_eq!(read_scan(&p, ScanMode::Inflation).unwrap(), s);

        let rows = vec![SpectrumRow {
            rank: 1,
            eigenvalue: 2.0,
            projection: -0.3,
            coefficient: -0.15,
            signal_to_noise: 0.045,
        }];
        let p = dir.path().join("eigen.csv");
        write_spectrum(&p, &rows).unwrap();
        assert_eq!(read_spectrum(&p).unwrap(), rows);
    }

    #[test]
    fn wrong_header_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_curves(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn unwritable_path_is_write_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("r.json");
        let err = write_json(&p, &serde_json::json!({"a": 1})).unwrap_err();
        assert!(matches!(err, Error::Write { .. }));
        assert!(err.is_validation());
    }
}
