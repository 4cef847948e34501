//! CSV ingestion of observation files and atomic file writes.
//!
//! The observations file has a header row: a response column, the
//! fixed-effect columns, one grouping column per random effect (string
//! labels, mapped in first-appearance order) and the random-effect
//! covariate columns. Missing values are not supported.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::design::{ModelDesign, RandomEffectSpec};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Column names defining how a CSV maps onto a model design.
#[derive(Debug, Clone)]
pub struct CsvModelSpec {
    pub response: String,
    pub fixed: Vec<String>,
    pub effects: Vec<CsvEffectSpec>,
}

#[derive(Debug, Clone)]
pub struct CsvEffectSpec {
    pub group: String,
    pub covariates: Vec<String>,
}

/// Level labels of one grouping column, in first-appearance order; the
/// index of a label is its 0-based level.
pub type LevelLabels = Vec<String>;

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::invalid("csv", format!("missing column '{name}'")))
}

fn parse_value<T: Real>(field: &str, column: &str, row: usize) -> Result<T> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Err(Error::invalid(
            "csv",
            format!("missing value in column '{column}' at data row {row}"),
        ));
    }
    let v: f64 = trimmed.parse().map_err(|_| {
        Error::invalid(
            "csv",
            format!("non-numeric value '{trimmed}' in column '{column}' at data row {row}"),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::non_finite(format!("column '{column}'")));
    }
    Ok(T::of(v))
}

/// Read a design from CSV. Returns the validated design plus the level
/// labels of each grouping column.
pub fn read_design_csv<T: Real, R: Read>(
    reader: R,
    spec: &CsvModelSpec,
) -> Result<(ModelDesign<T>, Vec<LevelLabels>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let y_col = column_index(&headers, &spec.response)?;
    let fixed_cols = spec
        .fixed
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let effect_cols = spec
        .effects
        .iter()
        .map(|e| {
            let g = column_index(&headers, &e.group)?;
            let cov = e
                .covariates
                .iter()
                .map(|c| column_index(&headers, c))
                .collect::<Result<Vec<_>>>()?;
            Ok((g, cov))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut y_vals: Vec<T> = Vec::new();
    let mut x_vals: Vec<Vec<T>> = Vec::new();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); spec.effects.len()];
    let mut labels: Vec<LevelLabels> = vec![Vec::new(); spec.effects.len()];
    let mut label_maps: Vec<HashMap<String, usize>> =
        vec![HashMap::new(); spec.effects.len()];
    let mut u_vals: Vec<Vec<Vec<T>>> = vec![Vec::new(); spec.effects.len()];

    for (row_idx, record) in rdr.records().enumerate() {
        let record = record?;
        y_vals.push(parse_value(&record[y_col], &spec.response, row_idx)?);
        x_vals.push(
            fixed_cols
                .iter()
                .zip(&spec.fixed)
                .map(|(&c, name)| parse_value(&record[c], name, row_idx))
                .collect::<Result<Vec<T>>>()?,
        );
        for (r, (g_col, cov_cols)) in effect_cols.iter().enumerate() {
            let label = record[*g_col].trim().to_string();
            if label.is_empty() {
                return Err(Error::invalid(
                    "csv",
                    format!(
                        "missing value in column '{}' at data row {row_idx}",
                        spec.effects[r].group
                    ),
                ));
            }
            let next = labels[r].len();
            let level = *label_maps[r].entry(label.clone()).or_insert_with(|| {
                labels[r].push(label);
                next
            });
            groups[r].push(level);
            u_vals[r].push(
                cov_cols
                    .iter()
                    .zip(&spec.effects[r].covariates)
                    .map(|(&c, name)| parse_value(&record[c], name, row_idx))
                    .collect::<Result<Vec<T>>>()?,
            );
        }
    }

    let n = y_vals.len();
    if n == 0 {
        return Err(Error::invalid("csv", "no data rows"));
    }
    let p = spec.fixed.len();
    let y = DVector::from_vec(y_vals);
    let x = DMatrix::from_fn(n, p, |i, j| x_vals[i][j]);
    let mut effects = Vec::with_capacity(spec.effects.len());
    for (r, e) in spec.effects.iter().enumerate() {
        let q = e.covariates.len();
        let u = DMatrix::from_fn(n, q, |i, j| u_vals[r][i][j]);
        effects.push(RandomEffectSpec::new(
            std::mem::take(&mut groups[r]),
            labels[r].len(),
            u,
        )?);
    }
    Ok((ModelDesign::new(y, x, effects)?, labels))
}

/// Write a file atomically: write to a sibling temp file, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
