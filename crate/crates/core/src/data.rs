//! Datasets of `(a, x, y)` triplets: ingestion, z-scoring and splitting.

use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Default sensitive attribute for the communities-and-crime table.
pub const CRIMES_SENSITIVE_DEFAULT: &str = "racepctblack";
/// Default regression target for the communities-and-crime table.
pub const CRIMES_TARGET_DEFAULT: &str = "ViolentCrimesPerPop";
/// Identifier / non-predictive columns dropped on ingestion.
pub const CRIMES_ID_COLUMNS: [&str; 5] = ["state", "county", "community", "communityname", "fold"];
/// Marker for a missing value.
pub const MISSING_MARKER: &str = "?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub column: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-column z-score parameters, always estimated on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub a: Vec<ColumnStats>,
    pub x: Vec<ColumnStats>,
    pub y: Vec<ColumnStats>,
}

impl Normalization {
    fn fit(t: &Tensor, names: &[String]) -> Vec<ColumnStats> {
        let means = t.column_means();
        let stds = t.column_stds();
        names
            .iter()
            .zip(means.into_iter().zip(stds))
            .map(|(n, (mean, std))| ColumnStats {
                column: n.clone(),
                mean,
                // constant columns are left centred but unscaled
                std: if std > 0.0 { std } else { 1.0 },
            })
            .collect()
    }

    fn apply(t: &Tensor, stats: &[ColumnStats], forward: bool) -> Tensor {
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (v, s) in out.row_mut(i).iter_mut().zip(stats) {
                *v = if forward {
                    (*v - s.mean) / s.std
                } else {
                    *v * s.std + s.mean
                };
            }
        }
        out
    }

    /// Flat `{column, mean, std}` records with role-prefixed column names.
    pub fn to_records(&self) -> Vec<ColumnStats> {
        let tag = |prefix: &str, v: &[ColumnStats]| {
            v.iter()
                .map(|s| ColumnStats {
                    column: format!("{prefix}.{}", s.column),
                    ..s.clone()
                })
                .collect::<Vec<_>>()
        };
        [tag("a", &self.a), tag("x", &self.x), tag("y", &self.y)].concat()
    }

    pub fn from_records(records: Vec<ColumnStats>) -> Result<Self> {
        let mut out = Normalization {
            a: vec![],
            x: vec![],
            y: vec![],
        };
        for r in records {
            let (role, name) = split_role(&r.column)?;
            let entry = ColumnStats {
                column: name.to_string(),
                ..r
            };
            match role {
                "a" => out.a.push(entry),
                "x" => out.x.push(entry),
                _ => out.y.push(entry),
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_records())? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_records(serde_json::from_str(text)?)
    }

    pub fn normalize_a(&self, v: f64) -> f64 {
        (v - self.a[0].mean) / self.a[0].std
    }

    pub fn denormalize_a(&self, v: f64) -> f64 {
        v * self.a[0].std + self.a[0].mean
    }

    pub fn normalize_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.x).map(|(v, s)| (v - s.mean) / s.std).collect()
    }

    pub fn denormalize_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.x).map(|(v, s)| v * s.std + s.mean).collect()
    }
}

fn split_role(column: &str) -> Result<(&str, &str)> {
    match column.split_once('.') {
        Some((role @ ("a" | "x" | "y"), name)) => Ok((role, name)),
        _ => Err(Error::Schema(format!(
            "column '{column}' lacks an 'a.', 'x.' or 'y.' role prefix"
        ))),
    }
}

/// `n` rows of sensitive attributes `a`, features `x` and targets `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub a: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    pub a_names: Vec<String>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    /// Stats used to z-score the current values, if they are normalized.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(
        a: Tensor,
        x: Tensor,
        y: Tensor,
        a_names: Vec<String>,
        x_names: Vec<String>,
        y_names: Vec<String>,
    ) -> Result<Self> {
        let n = a.rows();
        if x.rows() != n || y.rows() != n {
            return Err(Error::arg(format!(
                "row counts differ: a {n}, x {}, y {}",
                x.rows(),
                y.rows()
            )));
        }
        for (t, names, what) in [(&a, &a_names, "a"), (&x, &x_names, "x"), (&y, &y_names, "y")] {
            if t.cols() != names.len() {
                return Err(Error::arg(format!(
                    "{what} has {} columns but {} names",
                    t.cols(),
                    names.len()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Schema(format!("{what} contains non-finite values")));
            }
        }
        Ok(Self {
            a,
            x,
            y,
            a_names,
            x_names,
            y_names,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_a(&self) -> usize {
        self.a.cols()
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn d_y(&self) -> usize {
        self.y.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            a: self.a.gather_rows(indices),
            x: self.x.gather_rows(indices),
            y: self.y.gather_rows(indices),
            a_names: self.a_names.clone(),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Z-score parameters estimated from the current values.
    pub fn fit_normalization(&self) -> Normalization {
        Normalization {
            a: Normalization::fit(&self.a, &self.a_names),
            x: Normalization::fit(&self.x, &self.x_names),
            y: Normalization::fit(&self.y, &self.y_names),
        }
    }

    /// Applies `stats` to raw values. Fails if already normalized.
    pub fn normalized_with(&self, stats: &Normalization) -> Result<Dataset> {
        if self.normalization.is_some() {
            return Err(Error::arg("dataset is already normalized"));
        }
        Ok(Dataset {
            a: Normalization::apply(&self.a, &stats.a, true),
            x: Normalization::apply(&self.x, &stats.x, true),
            y: Normalization::apply(&self.y, &stats.y, true),
            normalization: Some(stats.clone()),
            ..self.clone()
        })
    }

    /// Raw values (a no-op clone for raw datasets).
    pub fn denormalized(&self) -> Dataset {
        match &self.normalization {
            None => self.clone(),
            Some(s) => Dataset {
                a: Normalization::apply(&self.a, &s.a, false),
                x: Normalization::apply(&self.x, &s.x, false),
                y: Normalization::apply(&self.y, &s.y, false),
                normalization: None,
                ..self.clone()
            },
        }
    }

    fn header(&self) -> Vec<String> {
        let tag = |p: &str, v: &[String]| v.iter().map(|n| format!("{p}.{n}")).collect::<Vec<_>>();
        [tag("a", &self.a_names), tag("x", &self.x_names), tag("y", &self.y_names)].concat()
    }

    /// Writes the rows as CSV with role-prefixed headers (`a.*`, `x.*`, `y.*`)
    /// and, when normalized, a sidecar JSON of `{column, mean, std}` records.
    pub fn write_csv(&self, path: &Path, sidecar: Option<&Path>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .a
                .row(i)
                .iter()
                .chain(self.x.row(i))
                .chain(self.y.row(i))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        write_atomic(path, &bytes)?;
        if let (Some(side), Some(norm)) = (sidecar, &self.normalization) {
            write_atomic(side, norm.to_json()?.as_bytes())?;
        }
        Ok(())
    }

    /// Reads a file written by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path, sidecar: Option<&Path>) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path).map_err(|e| map_csv_open(path, e))?;
        let headers = r.headers()?.clone();
        let mut roles = Vec::new();
        let (mut a_names, mut x_names, mut y_names) = (vec![], vec![], vec![]);
        for h in headers.iter() {
            let (role, name) = split_role(h)?;
            match role {
                "a" => a_names.push(name.to_string()),
                "x" => x_names.push(name.to_string()),
                _ => y_names.push(name.to_string()),
            }
            roles.push(role.to_string());
        }
        let (mut a, mut x, mut y) = (vec![], vec![], vec![]);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for (field, role) in rec.iter().zip(&roles) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Schema(format!("{}: row {} has non-numeric value '{field}'", path.display(), line + 1))
                })?;
                match role.as_str() {
                    "a" => a.push(v),
                    "x" => x.push(v),
                    _ => y.push(v),
                }
            }
        }
        let n = a.len() / a_names.len().max(1);
        let mut ds = Dataset::new(
            Tensor::from_vec(n, a_names.len(), a)?,
            Tensor::from_vec(n, x_names.len(), x)?,
            Tensor::from_vec(n, y_names.len(), y)?,
            a_names,
            x_names,
            y_names,
        )?;
        if let Some(side) = sidecar {
            let text = fs::read_to_string(side).map_err(|e| Error::io(side, e))?;
            ds.normalization = Some(Normalization::from_json(&text)?);
        }
        Ok(ds)
    }
}

fn map_csv_open(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    }
}

/// Shuffled train/test split of a raw (or normalized) dataset. Both sides
/// are z-scored with statistics computed on the training side only.
pub fn split(dataset: &Dataset, train_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::arg(format!(
            "splitting {n} rows at {train_fraction} leaves an empty side"
        )));
    }
    let raw = dataset.denormalized();
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let (train_idx, test_idx) = idx.split_at(n_train);
    let train_raw = raw.subset(train_idx);
    let test_raw = raw.subset(test_idx);
    let stats = train_raw.fit_normalization();
    Ok((train_raw.normalized_with(&stats)?, test_raw.normalized_with(&stats)?))
}

/// Same as [`split`] but also returns the shuffled train and test indices.
pub fn split_indices(n: usize, train_fraction: f64, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::arg(format!(
            "splitting {n} rows at {train_fraction} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Loads the communities-and-crime table (CSV with a header row).
///
/// Identifier columns, columns containing the missing marker, non-numeric
/// columns and constant columns are dropped. The returned dataset holds raw
/// values; [`split`] applies the training-split z-scoring.
pub fn load_crimes(path: &Path, sensitive_column: &str, target_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| map_csv_open(path, e))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    for required in [sensitive_column, target_column] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Schema(format!(
                "{}: column '{required}' not found",
                path.display()
            )));
        }
    }
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate().take(headers.len()) {
            columns[c].push(field.to_string());
        }
    }
    let n = columns.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }

    let mut sensitive = None;
    let mut target = None;
    let mut x_names = Vec::new();
    let mut x_cols: Vec<Vec<f64>> = Vec::new();
    for (name, raw) in headers.iter().zip(&columns) {
        let is_key = name == sensitive_column || name == target_column;
        if CRIMES_ID_COLUMNS.contains(&name.as_str()) && !is_key {
            continue;
        }
        if raw.iter().any(|v| v == MISSING_MARKER || v.is_empty()) {
            if is_key {
                return Err(Error::Schema(format!("column '{name}' has missing values")));
            }
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = raw.iter().map(|v| v.parse::<f64>()).collect();
        let Ok(values) = parsed else {
            if is_key {
                return Err(Error::Schema(format!("column '{name}' is not numeric")));
            }
            warn!("dropping non-numeric column '{name}'");
            continue;
        };
        let constant = values.iter().all(|&v| v == values[0]);
        if name == sensitive_column {
            if constant {
                return Err(Error::Schema(format!(
                    "sensitive column '{name}' is constant; a degenerate attribute cannot be intervened on"
                )));
            }
            sensitive = Some(values);
        } else if name == target_column {
            if constant {
                return Err(Error::Schema(format!("target column '{name}' is constant")));
            }
            target = Some(values);
        } else if constant {
            warn!("dropping constant column '{name}'");
        } else {
            x_names.push(name.clone());
            x_cols.push(values);
        }
    }
    let (a, y) = (sensitive.expect("checked above"), target.expect("checked above"));
    if x_cols.is_empty() {
        return Err(Error::Schema("no usable feature columns remain".into()));
    }
    info!("crimes table: {n} rows, {} feature columns after dropping", x_cols.len());
    let mut x = Tensor::zeros(n, x_cols.len());
    for (c, col) in x_cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            x.set(r, c, *v);
        }
    }
    Dataset::new(
        Tensor::column(&a),
        x,
        Tensor::column(&y),
        vec![sensitive_column.to_string()],
        x_names,
        vec![target_column.to_string()],
    )
}
