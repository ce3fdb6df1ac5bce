//! Plain-text artifacts: CSV tables with a header row, JSON records, and
//! SHA-256 checksums.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value reads back bit-identically.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CesError, Result};

pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn parse_f64(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "NaN" => Some(f64::NAN),
        t => t.parse().ok(),
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory, so
/// readers never observe a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CesError::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CesError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CesError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CesError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CesError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let map = |e: csv::Error| CesError::InvalidInput(format!("csv encoding: {e}"));
        w.write_record(&self.header).map_err(map)?;
        for r in &self.rows {
            w.write_record(r).map_err(map)?;
        }
        w.into_inner()
            .map_err(|e| CesError::InvalidInput(format!("csv encoding: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CesError::io(path, e))?;
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(bytes.as_slice());
        let header = r
            .headers()
            .map_err(|e| CesError::artifact(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CesError::artifact(path, e.to_string()))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { header, rows })
    }

    /// Parses column `name` as floats.
    pub fn f64_column(&self, name: &str, path: &Path) -> Result<Vec<f64>> {
        let c = self
            .column(name)
            .ok_or_else(|| CesError::artifact(path, format!("missing column {name}")))?;
        self.rows
            .iter()
            .map(|r| {
                parse_f64(&r[c]).ok_or_else(|| {
                    CesError::artifact(path, format!("bad number {:?} in {name}", r[c]))
                })
            })
            .collect()
    }

    pub fn u64_column(&self, name: &str, path: &Path) -> Result<Vec<u64>> {
        let c = self
            .column(name)
            .ok_or_else(|| CesError::artifact(path, format!("missing column {name}")))?;
        self.rows
            .iter()
            .map(|r| {
                r[c].parse().map_err(|_| {
                    CesError::artifact(path, format!("bad integer {:?} in {name}", r[c]))
                })
            })
            .collect()
    }
}

/// Matrix as a table whose columns are named `names` (one row per matrix row).
pub fn matrix_table(names: &[String], m: &DMatrix<f64>) -> Table {
    let mut t = Table::new(names.iter().cloned());
    for i in 0..m.nrows() {
        t.push(m.row(i).iter().map(|&v| fmt_f64(v)).collect());
    }
    t
}

pub fn write_matrix(path: &Path, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    matrix_table(names, m).write(path)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let t = Table::read(path)?;
    let ncols = t.header.len();
    let mut data = Vec::with_capacity(t.rows.len() * ncols);
    for r in &t.rows {
        if r.len() != ncols {
            return Err(CesError::artifact(path, "ragged row"));
        }
        for s in r {
            data.push(
                parse_f64(s)
                    .ok_or_else(|| CesError::artifact(path, format!("bad number {s:?}")))?,
            );
        }
    }
    Ok(DMatrix::from_row_slice(t.rows.len(), ncols, &data))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CesError::InvalidInput(format!("json encoding: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CesError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CesError::artifact(path, e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CesError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Checksum of the exact bit patterns of a float slice.
pub fn sha256_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
