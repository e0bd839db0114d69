//! Evaluation of counterfactuals: validity, proximity, kNN plausibility and
//! robustness under the two evaluation ensembles.
//!
//! All inputs are in the scaled feature space. Per-instance values are kept
//! so every aggregate can be recomputed; the reported spread is the
//! population standard deviation of the per-fold means.

use serde::{Deserialize, Serialize};

use crate::cfgen::CounterfactualResult;
use crate::classifier::Classifier;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_KNN: usize = 10;

/// Column names of the tabular report, in order.
pub const METRIC_COLUMNS: [&str; 6] = ["validity", "l1", "l2", "plausibility", "rob_ret", "rob_bs"];

fn nonempty(results: &[CounterfactualResult]) -> Result<()> {
    if results.is_empty() {
        Err(Error::invalid("no counterfactuals to evaluate"))
    } else {
        Ok(())
    }
}

fn cf_matrix(results: &[CounterfactualResult]) -> Result<Tensor> {
    Tensor::from_rows(&results.iter().map(|r| r.x_cf.as_slice()).collect::<Vec<_>>())
}

fn targets(results: &[CounterfactualResult]) -> Vec<u8> {
    results.iter().map(|r| r.target_class).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation; 0 for fewer than two values.
pub fn stdev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// 1 where the base model assigns `x_cf` to the target class, else 0.
pub fn validity_per_instance(base: &Classifier, results: &[CounterfactualResult]) -> Result<Vec<f64>> {
    nonempty(results)?;
    let pred = base.predict(&cf_matrix(results)?)?;
    Ok(pred
        .iter()
        .zip(results)
        .map(|(&p, r)| if p == r.target_class { 1.0 } else { 0.0 })
        .collect())
}

pub fn validity(base: &Classifier, results: &[CounterfactualResult]) -> Result<f64> {
    Ok(mean(&validity_per_instance(base, results)?))
}

/// `(|delta|_1, |delta|_2)` per instance.
pub fn proximity(results: &[CounterfactualResult]) -> Vec<(f64, f64)> {
    results.iter().map(|r| (r.l1(), r.l2())).collect()
}

/// Mean Euclidean distance from each `x_cf` to its `k` nearest training rows
/// of the counterfactual's target class.
pub fn plausibility_knn(
    results: &[CounterfactualResult],
    train_x: &Tensor,
    train_y: &[u8],
    k: usize,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if train_x.rows() != train_y.len() {
        return Err(Error::invalid("train_x and train_y lengths differ"));
    }
    let by_class: [Vec<usize>; 2] = [0u8, 1].map(|c| (0..train_y.len()).filter(|&i| train_y[i] == c).collect());
    let mut out = Vec::with_capacity(results.len());
    let mut dist = Vec::new();
    for r in results {
        let rows = &by_class[r.target_class as usize];
        if rows.len() < k {
            return Err(Error::invalid(format!(
                "class {} has {} training rows, need k = {k}",
                r.target_class,
                rows.len()
            )));
        }
        if r.x_cf.len() != train_x.cols() {
            return Err(Error::ShapeMismatch {
                op: "plausibility_knn",
                left: vec![r.x_cf.len()],
                right: vec![train_x.cols()],
            });
        }
        dist.clear();
        dist.extend(rows.iter().map(|&i| {
            train_x
                .row_slice(i)
                .iter()
                .zip(&r.x_cf)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        }));
        dist.select_nth_unstable_by(k - 1, f64::total_cmp);
        let nearest = &mut dist[..k];
        nearest.sort_by(f64::total_cmp);
        out.push(nearest.iter().sum::<f64>() / k as f64);
    }
    Ok(out)
}

/// Per-instance robustness under the retrained and the bootstrap evaluation ensembles.
pub fn robustness_per_instance(
    retrain: &Ensemble,
    bootstrap: &Ensemble,
    results: &[CounterfactualResult],
) -> Result<(Vec<f64>, Vec<f64>)> {
    nonempty(results)?;
    let x = cf_matrix(results)?;
    let t = targets(results);
    Ok((retrain.robustness(&x, &t)?, bootstrap.robustness(&x, &t)?))
}

pub fn robustness_pair(retrain: &Ensemble, bootstrap: &Ensemble, results: &[CounterfactualResult]) -> Result<(f64, f64)> {
    let (r, b) = robustness_per_instance(retrain, bootstrap, results)?;
    Ok((mean(&r), mean(&b)))
}

/// Per-instance metric values of one fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub validity: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub plausibility: Vec<f64>,
    pub rob_ret: Vec<f64>,
    pub rob_bs: Vec<f64>,
}

pub struct EvalContext<'a> {
    pub base: &'a Classifier,
    pub retrain: &'a Ensemble,
    pub bootstrap: &'a Ensemble,
    pub train_x: &'a Tensor,
    pub train_y: &'a [u8],
    pub k: usize,
}

impl FoldMetrics {
    pub fn evaluate(fold: usize, ctx: &EvalContext<'_>, results: &[CounterfactualResult]) -> Result<Self> {
        let validity = validity_per_instance(ctx.base, results)?;
        let (l1, l2) = proximity(results).into_iter().unzip();
        let plausibility = plausibility_knn(results, ctx.train_x, ctx.train_y, ctx.k)?;
        let (rob_ret, rob_bs) = robustness_per_instance(ctx.retrain, ctx.bootstrap, results)?;
        Ok(Self {
            fold,
            validity,
            l1,
            l2,
            plausibility,
            rob_ret,
            rob_bs,
        })
    }

    fn column(&self, name: &str) -> &[f64] {
        match name {
            "validity" => &self.validity,
            "l1" => &self.l1,
            "l2" => &self.l2,
            "plausibility" => &self.plausibility,
            "rob_ret" => &self.rob_ret,
            "rob_bs" => &self.rob_bs,
            _ => unreachable!("unknown metric column {name}"),
        }
    }

    /// Fold means in [`METRIC_COLUMNS`] order.
    pub fn means(&self) -> [f64; 6] {
        METRIC_COLUMNS.map(|c| mean(self.column(c)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Mean over all instances of all folds.
    pub mean: f64,
    /// Population standard deviation of `per_fold`.
    pub stdev: f64,
    pub per_fold: Vec<f64>,
    pub per_instance: Vec<f64>,
}

impl MetricSummary {
    pub fn from_folds(folds: &[&[f64]]) -> Self {
        let per_fold: Vec<f64> = folds.iter().map(|f| mean(f)).collect();
        let per_instance: Vec<f64> = folds.iter().flat_map(|f| f.iter().copied()).collect();
        Self {
            mean: mean(&per_instance),
            stdev: stdev(&per_fold),
            per_fold,
            per_instance,
        }
    }

    pub fn fold_mean(&self) -> f64 {
        mean(&self.per_fold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub validity: MetricSummary,
    pub l1: MetricSummary,
    pub l2: MetricSummary,
    pub plausibility: MetricSummary,
    pub rob_ret: MetricSummary,
    pub rob_bs: MetricSummary,
}

impl MetricsReport {
    pub fn from_folds(folds: &[FoldMetrics]) -> Result<Self> {
        if folds.is_empty() || folds.iter().any(|f| f.l1.is_empty()) {
            return Err(Error::invalid("metrics report needs at least one non-empty fold"));
        }
        let pick = |name: &str| MetricSummary::from_folds(&folds.iter().map(|f| f.column(name)).collect::<Vec<_>>());
        Ok(Self {
            validity: pick("validity"),
            l1: pick("l1"),
            l2: pick("l2"),
            plausibility: pick("plausibility"),
            rob_ret: pick("rob_ret"),
            rob_bs: pick("rob_bs"),
        })
    }

    /// Summaries in [`METRIC_COLUMNS`] order.
    pub fn columns(&self) -> [&MetricSummary; 6] {
        [
            &self.validity,
            &self.l1,
            &self.l2,
            &self.plausibility,
            &self.rob_ret,
            &self.rob_bs,
        ]
    }
}
