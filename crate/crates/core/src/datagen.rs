//! Data ingestion, standardization, splitting, and the built-in simulation
//! designs (binary, continuous, binary panel).

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Per-column training statistics plus the optional response scaling used by
/// the gaussian family. Test data reuses the training statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub y_mean: Option<f64>,
    pub y_sd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    /// Covariate names after any one-hot expansion.
    pub columns: Vec<String>,
    pub response: String,
    /// Per-row subject labels for panel data, in time order within subject.
    pub subjects: Option<Vec<String>>,
    /// Set once standardization has been applied.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    /// Computes training statistics and standardizes in place. Constant
    /// columns keep unit scale.
    pub fn standardize(&mut self, standardize_y: bool) -> Standardization {
        let n = self.x.nrows() as f64;
        let mut means = Vec::with_capacity(self.x.ncols());
        let mut sds = Vec::with_capacity(self.x.ncols());
        for mut col in self.x.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            col.mapv_inplace(|v| (v - mean) / sd);
            means.push(mean);
            sds.push(sd);
        }
        let (y_mean, y_sd) = if standardize_y {
            let mean = self.y.sum() / n;
            let var = self.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            self.y.mapv_inplace(|v| (v - mean) / sd);
            (Some(mean), Some(sd))
        } else {
            (None, None)
        };
        let record = Standardization { means, sds, y_mean, y_sd };
        self.standardization = Some(record.clone());
        record
    }

    /// Applies previously computed training statistics (for test rows).
    pub fn apply_standardization(&mut self, record: &Standardization) -> Result<()> {
        if record.means.len() != self.x.ncols() {
            return Err(Error::Dimension {
                what: "standardization columns",
                expected: record.means.len(),
                got: self.x.ncols(),
            });
        }
        for (j, mut col) in self.x.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - record.means[j]) / record.sds[j]);
        }
        if let (Some(m), Some(s)) = (record.y_mean, record.y_sd) {
            self.y.mapv_inplace(|v| (v - m) / s);
        }
        self.standardization = Some(record.clone());
        Ok(())
    }

    /// Undoes standardization, returning the original-scale data.
    pub fn unstandardize(&mut self) {
        if let Some(record) = self.standardization.take() {
            for (j, mut col) in self.x.columns_mut().into_iter().enumerate() {
                col.mapv_inplace(|v| v * record.sds[j] + record.means[j]);
            }
            if let (Some(m), Some(s)) = (record.y_mean, record.y_sd) {
                self.y.mapv_inplace(|v| v * s + m);
            }
        }
    }

    fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            columns: self.columns.clone(),
            response: self.response.clone(),
            subjects: self
                .subjects
                .as_ref()
                .map(|s| rows.iter().map(|&i| s[i].clone()).collect()),
            standardization: self.standardization.clone(),
        }
    }
}

pub fn binary_sim_score(x: &ArrayView1<f64>) -> f64 {
    5.0 - 2.0 * (x[0] + 2.0 * x[1]).powi(2) + 4.0 * x[2] * x[3] + 3.0 * x[4]
}

/// Binary simulation: 20 covariates from U(-1, 1), the last 15 irrelevant;
/// y = 1 iff 5 - 2(x1 + 2 x2)^2 + 4 x3 x4 + 3 x5 >= 0.
pub fn gen_binary_sim(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let x = Array2::from_shape_fn((n, 20), |_| rng.sample(u));
    let y = Array1::from_iter(
        x.rows().into_iter().map(|r| f64::from(binary_sim_score(&r) >= 0.0)),
    );
    Dataset {
        x,
        y,
        columns: (1..=20).map(|i| format!("x{i}")).collect(),
        response: "y".into(),
        subjects: None,
        standardization: None,
    }
}

pub fn continuous_sim_mean(x: &ArrayView1<f64>) -> f64 {
    5.0 + 10.0 * x[0]
        + 10.0 / (x[1] * x[1] + 1.0)
        + 5.0 * x[2] * x[3]
        + 2.0 * x[3]
        + 5.0 * x[3] * x[3]
        + 5.0 * x[4]
        + 2.0 * x[5]
        + 10.0 / (x[6] * x[6] + 1.0)
        + 5.0 * x[7] * x[8]
        + 5.0 * x[8] * x[8]
        + 5.0 * x[9]
}

/// Continuous simulation: 20 correlated normal covariates with covariance
/// 0.5^|i-j| (the last 10 irrelevant), unit noise.
pub fn gen_continuous_sim(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 20;
    let mut cov = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            cov[(i, j)] = 0.5f64.powi((i as i32 - j as i32).abs());
        }
    }
    let chol = linalg::cholesky(&cov).expect("AR covariance is positive definite");
    let mut x = Array2::<f64>::zeros((n, p));
    let mut y = Array1::<f64>::zeros(n);
    let mut z = Array1::<f64>::zeros(p);
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let row = chol.dot(&z);
        x.row_mut(i).assign(&row);
        y[i] = continuous_sim_mean(&row.view()) + rng.sample::<f64, _>(StandardNormal);
    }
    Dataset {
        x,
        y,
        columns: (1..=20).map(|i| format!("x{i}")).collect(),
        response: "y".into(),
        subjects: None,
        standardization: None,
    }
}

pub fn panel_sim_score(x: &ArrayView1<f64>, b: f64, eps: f64) -> f64 {
    2.0 + 3.0 * (x[0] - 2.0 * x[1]).powi(2) - 5.0 * x[2] / (1.0 + x[3]).powi(2)
        - 5.0 * x[4]
        + b
        + eps
}

/// Binary panel simulation: n subjects observed T times, 5 covariates from
/// U(-1, 1), a random intercept with variance 0.1, unit observation noise;
/// y = 1 iff the latent score is strictly positive.
pub fn gen_panel_sim(n_subjects: usize, t_len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let b_sd = 0.1f64.sqrt();
    let n = n_subjects * t_len;
    let mut x = Array2::<f64>::zeros((n, 5));
    let mut y = Array1::<f64>::zeros(n);
    let mut subjects = Vec::with_capacity(n);
    let mut row = 0;
    for subj in 0..n_subjects {
        let b = b_sd * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..t_len {
            for j in 0..5 {
                x[(row, j)] = rng.sample(u);
            }
            let eps: f64 = rng.sample(StandardNormal);
            let a = panel_sim_score(&x.row(row), b, eps);
            assert!(a.is_finite(), "latent panel score overflowed");
            y[row] = f64::from(a > 0.0);
            subjects.push(format!("{}", subj + 1));
            row += 1;
        }
    }
    Dataset {
        x,
        y,
        columns: (1..=5).map(|i| format!("x{i}")).collect(),
        response: "y".into(),
        subjects: Some(subjects),
        standardization: None,
    }
}

/// Random train/test split by row fraction, reproducible by seed.
pub fn split_random(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&train_fraction) && train_fraction != 1.0 {
        return Err(Error::Config(format!("train fraction {train_fraction} out of (0, 1]")));
    }
    let n = ds.n_rows();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let train: Vec<usize> = idx[..n_train].to_vec();
    let test: Vec<usize> = idx[n_train..].to_vec();
    Ok((ds.select_rows(&train), ds.select_rows(&test)))
}

/// Panel split: the first `train_t` time-ordered rows of every subject go to
/// training, the rest to test. Never leaks a later row into training.
pub fn split_panel(ds: &Dataset, train_t: usize) -> Result<(Dataset, Dataset)> {
    let subjects = ds
        .subjects
        .as_ref()
        .ok_or_else(|| Error::Config("panel split requires a subject column".into()))?;
    let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let count = seen.entry(s.as_str()).or_insert(0);
        if *count < train_t {
            train_rows.push(i);
        } else {
            test_rows.push(i);
        }
        *count += 1;
    }
    Ok((ds.select_rows(&train_rows), ds.select_rows(&test_rows)))
}

/// Loads a comma-separated file with a header row. Fully numeric columns are
/// used as-is; fully non-numeric columns are one-hot expanded over their
/// sorted levels; mixed columns are rejected. Line numbers in errors count
/// the header as line 1.
pub fn load_table(path: &Path, response: &str, subject: Option<&str>) -> Result<Dataset> {
    let (ds, has_response) = parse_table(path, response, subject)?;
    if !has_response {
        return Err(Error::Data {
            line: Some(1),
            msg: format!("no response column '{response}'"),
        });
    }
    Ok(ds)
}

/// Like `load_table`, but a missing response column is allowed: the returned
/// flag is false and y is all zeros (for prediction on unlabeled data).
pub fn load_table_for_prediction(
    path: &Path,
    response: &str,
    subject: Option<&str>,
) -> Result<(Dataset, bool)> {
    parse_table(path, response, subject)
}

fn parse_table(path: &Path, response: &str, subject: Option<&str>) -> Result<(Dataset, bool)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data { line: None, msg: format!("cannot open {path:?}: {e}") })?;
    let headers: Vec<String> =
        reader.headers().map_err(csv_err)?.iter().map(|s| s.to_string()).collect();
    let resp_idx = headers.iter().position(|h| h == response);
    let subj_idx = match subject {
        None => None,
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| Error::Data {
            line: Some(1),
            msg: format!("no subject column '{name}'"),
        })?),
    };

    let mut cells: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data { line: Some(i + 2), msg: format!("{e}") })?;
        let row: Vec<String> = rec.iter().map(|s| s.to_string()).collect();
        for (j, cell) in row.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Data {
                    line: Some(i + 2),
                    msg: format!("missing value in column '{}'", headers[j]),
                });
            }
        }
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(Error::Data { line: None, msg: "file has no data rows".into() });
    }

    let n = cells.len();
    let mut x_cols: Vec<(String, Vec<f64>)> = Vec::new();
    let mut y = vec![0.0; n];
    let mut subjects = subj_idx.map(|_| Vec::with_capacity(n));

    for (j, name) in headers.iter().enumerate() {
        if Some(j) == subj_idx {
            let out = subjects.as_mut().unwrap();
            for row in &cells {
                out.push(row[j].clone());
            }
            continue;
        }
        let parsed: Vec<Option<f64>> = cells.iter().map(|row| row[j].parse::<f64>().ok()).collect();
        let n_numeric = parsed.iter().filter(|v| v.is_some()).count();
        if Some(j) == resp_idx {
            if n_numeric < n {
                let bad = parsed.iter().position(|v| v.is_none()).unwrap();
                return Err(Error::Data {
                    line: Some(bad + 2),
                    msg: format!("non-numeric response '{}'", cells[bad][j]),
                });
            }
            y = parsed.into_iter().map(|v| v.unwrap()).collect();
        } else if n_numeric == n {
            x_cols.push((name.clone(), parsed.into_iter().map(|v| v.unwrap()).collect()));
        } else if n_numeric == 0 {
            // categorical: one-hot over sorted levels
            let mut levels: Vec<&String> = cells.iter().map(|row| &row[j]).collect();
            levels.sort();
            levels.dedup();
            let levels: Vec<String> = levels.into_iter().cloned().collect();
            for level in &levels {
                let col: Vec<f64> =
                    cells.iter().map(|row| f64::from(row[j] == *level)).collect();
                x_cols.push((format!("{name}={level}"), col));
            }
        } else {
            let bad = parsed.iter().position(|v| v.is_none()).unwrap();
            return Err(Error::Data {
                line: Some(bad + 2),
                msg: format!(
                    "non-numeric cell '{}' in numeric column '{}'",
                    cells[bad][j], name
                ),
            });
        }
    }

    let p = x_cols.len();
    let mut x = Array2::<f64>::zeros((n, p));
    for (j, (_, col)) in x_cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    Ok((
        Dataset {
            x,
            y: Array1::from_vec(y),
            columns: x_cols.into_iter().map(|(name, _)| name).collect(),
            response: response.to_string(),
            subjects,
            standardization: None,
        },
        resp_idx.is_some(),
    ))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data { line: None, msg: format!("{e}") }
}

/// Writes the dataset as CSV with full round-trip float formatting.
pub fn write_table(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = Vec::new();
    if ds.subjects.is_some() {
        header.push("subject".into());
    }
    header.extend(ds.columns.iter().cloned());
    header.push(ds.response.clone());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..ds.n_rows() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        if let Some(s) = &ds.subjects {
            fields.push(s[i].clone());
        }
        for j in 0..ds.n_cols() {
            fields.push(format!("{}", ds.x[(i, j)]));
        }
        fields.push(format!("{}", ds.y[i]));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
