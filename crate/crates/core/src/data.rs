//! Datasets, min-max scaling and the fold protocol.
//!
//! Each fold holds out a disjoint 20% test chunk; the remaining rows are split
//! evenly into a training set and a validation pool (40/40/20 overall). The
//! scaler is fitted on the training rows only and non-training rows are clipped
//! into `[0, 1]` after scaling.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

/// Per-feature `(min, max)` fitted on a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Tensor, rows: &[usize], names: &[String]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("cannot fit a scaler on zero rows"));
        }
        let d = x.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for &r in rows {
            for (j, &v) in x.row_slice(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for j in 0..d {
            if min[j] >= max[j] {
                let name = names.get(j).cloned().unwrap_or_else(|| format!("#{j}"));
                return Err(Error::ConstantFeature(name));
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn scale_value(&self, j: usize, v: f64) -> f64 {
        (v - self.min[j]) / (self.max[j] - self.min[j])
    }

    pub fn unscale_value(&self, j: usize, v: f64) -> f64 {
        v * (self.max[j] - self.min[j]) + self.min[j]
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.scale_value(i % d, *v);
        }
        out
    }

    /// Scales and clips into `[0, 1]`; also returns how many entries were clipped.
    pub fn transform_clipped(&self, x: &Tensor) -> (Tensor, usize) {
        let mut out = self.transform(x);
        let mut clipped = 0;
        for v in out.data_mut() {
            if *v < 0.0 || *v > 1.0 {
                clipped += 1;
                *v = v.clamp(0.0, 1.0);
            }
        }
        (out, clipped)
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = self.unscale_value(i % d, *v);
        }
        out
    }
}

/// A labelled dataset. `x` is `raw` scaled by `scaler`, which is fitted on all
/// rows; fold-level work re-fits a scaler on each fold's training part.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub raw: Tensor,
    pub x: Tensor,
    pub y: Vec<u8>,
    pub feature_names: Vec<String>,
    pub scaler: Scaler,
}

impl Dataset {
    pub fn new(raw: Tensor, y: Vec<u8>, feature_names: Vec<String>) -> Result<Self> {
        if raw.rows() != y.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                raw.rows(),
                y.len()
            )));
        }
        if raw.rows() == 0 {
            return Err(Error::invalid("dataset has no rows"));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("label {bad} is not binary")));
        }
        if feature_names.len() != raw.cols() {
            return Err(Error::invalid("feature name count does not match columns"));
        }
        let all: Vec<usize> = (0..raw.rows()).collect();
        let scaler = Scaler::fit(&raw, &all, &feature_names)?;
        let x = scaler.transform(&raw);
        Ok(Self {
            raw,
            x,
            y,
            feature_names,
            scaler,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.raw.rows()
    }

    pub fn n_features(&self) -> usize {
        self.raw.cols()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.y.iter().filter(|&&v| v == 1).count();
        [self.y.len() - ones, ones]
    }

    /// SHA-256 over the raw feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.raw.rows() as u64).to_le_bytes());
        h.update((self.raw.cols() as u64).to_le_bytes());
        for v in self.raw.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(&self.y);
        hex::encode(h.finalize())
    }

    /// Materializes one fold: scaler fitted on the training rows, other parts clipped.
    pub fn fold(&self, split: &FoldSplit) -> Result<FoldData> {
        let scaler = Scaler::fit(&self.raw, &split.train_idx, &self.feature_names)?;
        let part = |idx: &[usize], clip: bool| {
            let raw = self.raw.select_rows(idx);
            let (x, clipped) = if clip {
                scaler.transform_clipped(&raw)
            } else {
                (scaler.transform(&raw), 0)
            };
            let y = idx.iter().map(|&i| self.y[i]).collect();
            (
                Part {
                    x,
                    y,
                    idx: idx.to_vec(),
                },
                clipped,
            )
        };
        let (train, _) = part(&split.train_idx, false);
        let (valpool, c1) = part(&split.valpool_idx, true);
        let (test, c2) = part(&split.test_idx, true);
        if c1 + c2 > 0 {
            info!(
                fold = split.fold_index,
                clipped = c1 + c2,
                "clipped out-of-range entries in valpool/test"
            );
        }
        Ok(FoldData {
            fold_index: split.fold_index,
            train,
            valpool,
            test,
            scaler,
            clipped: c1 + c2,
        })
    }
}

/// Scaled rows of one part of a fold, with their indices into the dataset.
#[derive(Clone, Debug)]
pub struct Part {
    pub x: Tensor,
    pub y: Vec<u8>,
    pub idx: Vec<usize>,
}

impl Part {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FoldData {
    pub fold_index: usize,
    pub train: Part,
    pub valpool: Part,
    pub test: Part,
    pub scaler: Scaler,
    pub clipped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_idx: Vec<usize>,
    pub valpool_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Two interleaving half circles with `n / 2` points per class (class 1 gets
/// the extra point when `n` is odd), Gaussian noise added before scaling.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!("make_moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise must be >= 0, got {noise}")));
    }
    let n0 = n / 2;
    let n1 = n - n0;
    let arc = |m: usize, i: usize| {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut points: Vec<([f64; 2], u8)> = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = arc(n0, i);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n1 {
        let t = arc(n1, i);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = seed::rng(seed);
    points.shuffle(&mut rng);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise validated above");
        for (p, _) in points.iter_mut() {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    let data = points.iter().flat_map(|(p, _)| *p).collect();
    let y = points.iter().map(|(_, c)| *c).collect();
    Dataset::new(
        Tensor::matrix(n, 2, data)?,
        y,
        vec!["x0".to_string(), "x1".to_string()],
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub label_column: String,
    pub positive_label: String,
    #[serde(default)]
    pub drop_columns: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "?" | "null")
}

fn label_matches(cell: &str, positive: &str) -> bool {
    if cell == positive {
        return true;
    }
    match (cell.parse::<f64>(), positive.parse::<f64>()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Reads a headed, comma-separated file. Rows with a missing cell are dropped.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let label_pos = headers
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| Error::MissingColumn(opts.label_column.clone()))?;
    for d in &opts.drop_columns {
        if !headers.contains(d) {
            return Err(Error::MissingColumn(d.clone()));
        }
    }
    let dropped: HashSet<&str> = opts.drop_columns.iter().map(String::as_str).collect();
    let feature_pos: Vec<usize> = (0..headers.len())
        .filter(|&j| j != label_pos && !dropped.contains(headers[j].as_str()))
        .collect();
    let feature_names: Vec<String> = feature_pos.iter().map(|&j| headers[j].clone()).collect();

    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut missing_rows = 0usize;
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let cells: Vec<&str> = record.iter().map(str::trim).collect();
        let label = cells[label_pos];
        if is_missing(label) || feature_pos.iter().any(|&j| is_missing(cells[j])) {
            missing_rows += 1;
            continue;
        }
        for &j in &feature_pos {
            let v: f64 = cells[j].parse().map_err(|_| Error::NonNumeric {
                row: row_no + 1,
                column: headers[j].clone(),
                value: cells[j].to_string(),
            })?;
            data.push(v);
        }
        y.push(u8::from(label_matches(label, &opts.positive_label)));
    }
    if missing_rows > 0 {
        info!(path = %path.display(), dropped = missing_rows, "dropped rows with missing values");
    }
    if y.is_empty() {
        return Err(Error::invalid(format!(
            "{} has no usable rows after dropping missing values",
            path.display()
        )));
    }
    let raw = Tensor::matrix(y.len(), feature_pos.len(), data)?;
    Dataset::new(raw, y, feature_names)
}

/// Deterministic `n_folds`-way protocol: fold `f` tests on the `f`-th chunk of a
/// seeded permutation and splits the remaining rows evenly into train/valpool.
pub fn split_folds(n_rows: usize, n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_rows < 25 {
        return Err(Error::invalid(format!(
            "fold protocol needs at least 25 rows, got {n_rows}"
        )));
    }
    if n_folds < 2 {
        return Err(Error::invalid("n_folds must be at least 2"));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "folds", 0)));

    let base = n_rows / n_folds;
    let extra = n_rows % n_folds;
    let mut bounds = Vec::with_capacity(n_folds + 1);
    bounds.push(0);
    for f in 0..n_folds {
        bounds.push(bounds[f] + base + usize::from(f < extra));
    }

    Ok((0..n_folds)
        .map(|f| {
            let test_idx = order[bounds[f]..bounds[f + 1]].to_vec();
            let mut rest: Vec<usize> = order[..bounds[f]]
                .iter()
                .chain(&order[bounds[f + 1]..])
                .copied()
                .collect();
            rest.shuffle(&mut seed::rng(seed::derive(seed, "fold-rest", f as u64)));
            let n_train = rest.len().div_ceil(2);
            let valpool_idx = rest.split_off(n_train);
            FoldSplit {
                fold_index: f,
                train_idx: rest,
                valpool_idx,
                test_idx,
            }
        })
        .collect())
}

/// Sampling with replacement, same length as the input.
pub fn bootstrap_sample(idx: &[usize], seed: u64) -> Result<Vec<usize>> {
    if idx.is_empty() {
        return Err(Error::invalid("bootstrap_sample on an empty index list"));
    }
    let mut rng = seed::rng(seed);
    Ok((0..idx.len())
        .map(|_| idx[rng.random_range(0..idx.len())])
        .collect())
}
