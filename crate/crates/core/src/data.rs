//! Datasets: CSV ingestion, train/test splitting and synthetic GP draws.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Binary classification data with labels in `{−1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_names: Vec<String>,
    pub label_map: Option<LabelMap>,
    pub standardization: Option<Standardization>,
}

/// Raw label values mapped to `−1` and `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub negative: String,
    pub positive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

/// Label column selected by header name or zero-based index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
    Last,
}

impl FromStr for LabelColumn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Config("empty label column".into()));
        }
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

impl fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelColumn::Name(n) => f.write_str(n),
            LabelColumn::Index(i) => write!(f, "{i}"),
            LabelColumn::Last => f.write_str("last"),
        }
    }
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension {
                context: "labels",
                expected: x.nrows(),
                found: y.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        if y.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Config("labels must be −1 or +1".into()));
        }
        let feature_names = (0..x.ncols()).map(|k| format!("x{k}")).collect();
        Ok(Self {
            x,
            y,
            feature_names,
            label_map: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// `(negatives, positives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.y.iter().filter(|&&v| v > 0.0).count();
        (self.len() - pos, pos)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            feature_names: self.feature_names.clone(),
            label_map: self.label_map.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Writes features and a trailing `label` column of ±1. Values use the
    /// shortest decimal form that parses back to the same binary64.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{}", self.y[i] as i32));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a comma-separated file. Labels must take exactly two distinct
/// values; the smaller one (numerically if both parse, else lexically) maps
/// to −1.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in reader.records() {
        rows.push(rec?);
    }
    let width = match (&header, rows.first()) {
        (Some(h), _) => h.len(),
        (None, Some(r)) => r.len(),
        (None, None) => 0,
    };
    if width < 2 {
        return Err(Error::Config(format!(
            "{}: need at least one feature and a label column",
            path.display()
        )));
    }
    let label_idx = match label {
        LabelColumn::Last => width - 1,
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => {
            return Err(Error::Config(format!("label column {i} out of range ({width} columns)")))
        }
        LabelColumn::Name(name) => header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| Error::Config(format!("no column named `{name}`")))?,
    };
    let column_name = |k: usize| -> String {
        header
            .as_ref()
            .map(|h| h[k].clone())
            .unwrap_or_else(|| format!("{k}"))
    };
    let first_line = if has_header { 2 } else { 1 };

    let d = width - 1;
    let mut feats = Vec::with_capacity(rows.len() * d);
    let mut raw_labels = Vec::with_capacity(rows.len());
    for (r, rec) in rows.iter().enumerate() {
        let line = r + first_line;
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: String::new(),
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (k, cell) in rec.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: column_name(k),
                    message: "missing value".into(),
                });
            }
            if k == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: column_name(k),
                message: format!("cannot parse `{cell}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    column: column_name(k),
                    message: "non-finite value".into(),
                });
            }
            feats.push(v);
        }
    }

    let mut distinct: Vec<String> = raw_labels.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != 2 {
        return Err(Error::Labels {
            path: path.to_path_buf(),
            found: distinct.len(),
        });
    }
    if let (Ok(a), Ok(b)) = (distinct[0].parse::<f64>(), distinct[1].parse::<f64>()) {
        if b < a {
            distinct.swap(0, 1);
        }
    }
    let map = LabelMap {
        negative: distinct[0].clone(),
        positive: distinct[1].clone(),
    };
    let y = DVector::from_iterator(
        raw_labels.len(),
        raw_labels
            .iter()
            .map(|l| if *l == map.positive { 1.0 } else { -1.0 }),
    );
    let n = raw_labels.len();
    let x = DMatrix::from_row_slice(n, d, &feats);
    let feature_names = (0..width)
        .filter(|&k| k != label_idx)
        .map(column_name)
        .collect();
    Ok(Dataset {
        x,
        y,
        feature_names,
        label_map: Some(map),
        standardization: None,
    })
}

/// Seeded permutation split with `round(test_fraction·n)` test rows, then
/// per-feature standardization using training statistics only.
pub fn standardize_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n = data.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = perm.split_at(n_test);
    let mut train = data.subset(train_idx);
    let mut test = data.subset(test_idx);

    let d = data.dim();
    let nt = train.len().max(1) as f64;
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    for k in 0..d {
        let col = train.x.column(k);
        let mean = col.sum() / nt;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nt;
        means[k] = mean;
        if var > 0.0 {
            scales[k] = var.sqrt();
        }
    }
    for set in [&mut train, &mut test] {
        for k in 0..d {
            for v in set.x.column_mut(k).iter_mut() {
                *v = (*v - means[k]) / scales[k];
            }
        }
        set.standardization = Some(Standardization {
            means: means.clone(),
            scales: scales.clone(),
        });
    }
    Ok((train, test))
}

/// Isotropic squared-exponential prior used to draw synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub lengthscale: f64,
    pub amplitude: f64,
}

impl Default for GpPrior {
    fn default() -> Self {
        Self {
            lengthscale: 0.5,
            amplitude: 4.0,
        }
    }
}

/// Draws `x ~ N(0, I_d)`, `f ~ N(0, K + jitter·I)` by dense Cholesky and
/// `y = sign(f + ε)` with standard normal `ε`. Returns the latent `f` too.
pub fn synthetic_gp_latent(n: usize, d: usize, prior: &GpPrior, seed: u64) -> Result<(Dataset, DVector<f64>)> {
    if d == 0 {
        return Err(Error::Config("synthetic data needs d ≥ 1".into()));
    }
    if !(prior.lengthscale > 0.0 && prior.amplitude >= 0.0) {
        return Err(Error::Config("invalid synthetic prior".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let inv_l2 = 1.0 / (prior.lengthscale * prior.lengthscale);
    let jitter = 1e-6 * prior.amplitude.max(1e-12);
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let mut r2 = 0.0;
            for c in 0..d {
                let diff = x[(i, c)] - x[(j, c)];
                r2 += diff * diff;
            }
            let v = prior.amplitude * (-0.5 * r2 * inv_l2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(j, j)] += jitter;
    }
    let chol = linalg::cholesky(&k, "synthetic covariance")?;
    drop(k);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let f = chol.l_dirty().lower_triangle() * z;
    let y = DVector::from_fn(n, |i, _| {
        let eps: f64 = StandardNormal.sample(&mut rng);
        if f[i] + eps >= 0.0 {
            1.0
        } else {
            -1.0
        }
    });
    Ok((Dataset::new(x, y)?, f))
}

pub fn synthetic_gp(n: usize, d: usize, prior: &GpPrior, seed: u64) -> Result<Dataset> {
    Ok(synthetic_gp_latent(n, d, prior, seed)?.0)
}

/// Joint draw of `n_train + n_test` points split into two sets.
pub fn synthetic_split(
    n_train: usize,
    n_test: usize,
    d: usize,
    prior: &GpPrior,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let all = synthetic_gp(n_train + n_test, d, prior, seed)?;
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..n_train + n_test).collect();
    Ok((all.subset(&train), all.subset(&test)))
}
