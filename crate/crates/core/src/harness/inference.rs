use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::artifacts::write_atomic;
use super::offline::{Experiment, Stage};
use crate::cfgen::{self, BaselineConfig, CounterfactualResult};
use crate::ensemble::EnsembleKind;
use crate::error::{Error, Result};
use crate::metrics::{EvalContext, FoldMetrics, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Croce,
    Baseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Croce => "croce",
            Method::Baseline => "baseline",
        }
    }

    fn offline_stages(self) -> &'static [Stage] {
        match self {
            Method::Croce => &Stage::GENERATION,
            Method::Baseline => &Stage::BASELINE,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "croce" => Ok(Method::Croce),
            "baseline" => Ok(Method::Baseline),
            other => Err(Error::Config(format!("unknown method `{other}` (expected croce or baseline)"))),
        }
    }
}

/// One generator configuration within a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub method: Method,
    /// `None` for the baseline.
    pub gamma: Option<f64>,
    /// alpha for the robust generator, lambda for the baseline.
    pub alpha: f64,
}

impl Setting {
    fn same(&self, r: &ResultRecord) -> bool {
        self.method == r.method && self.gamma == r.gamma && self.alpha == r.alpha
    }
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: Method,
    pub dataset: String,
    pub fold: usize,
    /// Row index in the loaded dataset.
    pub index: usize,
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub target_class: u8,
    pub x0: Vec<f64>,
    pub x_cf: Vec<f64>,
    pub delta: Vec<f64>,
    pub s_star: f64,
    pub final_loss: f64,
    pub hinge_active: bool,
}

impl ResultRecord {
    fn new(setting: &Setting, dataset: &str, fold: usize, index: usize, r: CounterfactualResult) -> Self {
        Self {
            method: setting.method,
            dataset: dataset.to_string(),
            fold,
            index,
            gamma: r.gamma,
            alpha: r.alpha,
            target_class: r.target_class,
            x0: r.x0,
            x_cf: r.x_cf,
            delta: r.delta,
            s_star: r.s_star,
            final_loss: r.final_loss,
            hinge_active: r.hinge_active,
        }
    }

    /// The result without optimization traces, which are not persisted.
    pub fn to_result(&self) -> CounterfactualResult {
        CounterfactualResult {
            x0: self.x0.clone(),
            delta: self.delta.clone(),
            x_cf: self.x_cf.clone(),
            s_star: self.s_star,
            target_class: self.target_class,
            gamma: self.gamma,
            alpha: self.alpha,
            loss_trace: Vec::new(),
            s_trace: Vec::new(),
            final_loss: self.final_loss,
            hinge_active: self.hinge_active,
        }
    }
}

/// Aggregated metrics for one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub dataset: String,
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub n_instances: usize,
    pub folds: Vec<FoldMetrics>,
    pub metrics: MetricsReport,
}

#[derive(Serialize)]
struct ReportCsvRow<'a> {
    method: &'a str,
    dataset: &'a str,
    gamma: Option<f64>,
    alpha: f64,
    n: usize,
    validity: f64,
    validity_std: f64,
    l1: f64,
    l1_std: f64,
    l2: f64,
    l2_std: f64,
    plausibility: f64,
    plausibility_std: f64,
    rob_ret: f64,
    rob_ret_std: f64,
    rob_bs: f64,
    rob_bs_std: f64,
}

impl ReportRow {
    fn csv_row(&self) -> ReportCsvRow<'_> {
        let m = &self.metrics;
        ReportCsvRow {
            method: self.method.as_str(),
            dataset: &self.dataset,
            gamma: self.gamma,
            alpha: self.alpha,
            n: self.n_instances,
            validity: m.validity.mean,
            validity_std: m.validity.stdev,
            l1: m.l1.mean,
            l1_std: m.l1.stdev,
            l2: m.l2.mean,
            l2_std: m.l2.stdev,
            plausibility: m.plausibility.mean,
            plausibility_std: m.plausibility.stdev,
            rob_ret: m.rob_ret.mean,
            rob_ret_std: m.rob_ret.stdev,
            rob_bs: m.rob_bs.mean,
            rob_bs_std: m.rob_bs.stdev,
        }
    }
}

impl Experiment {
    /// Test rows to explain on `fold` (dataset indices and targets), capped by `max_test_instances`.
    pub fn explanation_targets(&self, fold: usize) -> Result<(Vec<usize>, Vec<(Vec<f64>, u8)>)> {
        let data = self.fold_data(fold)?;
        let base = self.load_base(fold)?;
        let mut targets = cfgen::select_explanation_targets(&base, &data.test.x)?;
        let mut idx = data.test.idx.clone();
        if let Some(m) = self.config.max_test_instances {
            targets.truncate(m);
            idx.truncate(m);
        }
        Ok((idx, targets))
    }

    /// Runs the needed offline stages, then generates counterfactuals for each setting.
    /// Records are ordered by setting, then fold, then test row.
    pub fn generate(&self, settings: &[Setting]) -> Result<Vec<ResultRecord>> {
        let mut stages: Vec<Stage> = settings.iter().flat_map(|s| s.method.offline_stages().iter().copied()).collect();
        stages.push(Stage::Base);
        self.run_offline(&stages)?;
        let dataset = self.dataset_name();
        let per_fold: Vec<Vec<Vec<ResultRecord>>> = (0..self.n_folds())
            .into_par_iter()
            .map(|fold| self.generate_fold(fold, settings, &dataset))
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        for si in 0..settings.len() {
            for fold in &per_fold {
                out.extend(fold[si].iter().cloned());
            }
        }
        Ok(out)
    }

    fn generate_fold(&self, fold: usize, settings: &[Setting], dataset: &str) -> Result<Vec<Vec<ResultRecord>>> {
        let (idx, targets) = self.explanation_targets(fold)?;
        let needs = |m: Method| settings.iter().any(|s| s.method == m);
        let flow = if needs(Method::Croce) { Some(self.load_flow(fold)?) } else { None };
        let class_flow = if needs(Method::Baseline) {
            Some(self.load_class_flow(fold)?)
        } else {
            None
        };
        let base = self.load_base(fold)?;
        let gen = &self.config.generator;
        settings
            .iter()
            .map(|setting| {
                let results = match setting.method {
                    Method::Croce => {
                        let gamma = setting
                            .gamma
                            .ok_or_else(|| Error::Config("robust generation needs a gamma".into()))?;
                        let cfg = gen.croce(gamma, setting.alpha);
                        cfgen::generate_croce_many(flow.as_ref().expect("loaded"), &targets, &cfg)?
                    }
                    Method::Baseline => {
                        let cfg = BaselineConfig {
                            lambda: setting.alpha,
                            ..self.config.baseline.clone()
                        };
                        cfgen::generate_baseline_many(class_flow.as_ref().expect("loaded"), &base, &targets, &cfg)?
                    }
                };
                info!(
                    fold,
                    method = setting.method.as_str(),
                    gamma = setting.gamma.unwrap_or(f64::NAN),
                    alpha = setting.alpha,
                    n = results.len(),
                    "counterfactuals generated"
                );
                Ok(results
                    .into_iter()
                    .zip(&idx)
                    .map(|(r, &i)| ResultRecord::new(setting, dataset, fold, i, r))
                    .collect())
            })
            .collect()
    }

    /// Scores records with the evaluation ensembles; one row per distinct setting, in first-seen order.
    pub fn evaluate(&self, records: &[ResultRecord]) -> Result<Vec<ReportRow>> {
        if records.is_empty() {
            return Err(Error::invalid("no result records to evaluate"));
        }
        self.run_offline(&Stage::EVALUATION)?;
        let mut settings: Vec<Setting> = Vec::new();
        for r in records {
            if !settings.iter().any(|s| s.same(r)) {
                settings.push(Setting {
                    method: r.method,
                    gamma: r.gamma,
                    alpha: r.alpha,
                });
            }
        }
        if let Some(r) = records.iter().find(|r| r.fold >= self.n_folds()) {
            return Err(Error::invalid(format!("record refers to fold {} of {}", r.fold, self.n_folds())));
        }
        let k = self.config.knn_k;
        let per_fold: Vec<Vec<Option<FoldMetrics>>> = (0..self.n_folds())
            .into_par_iter()
            .map(|fold| {
                let data = self.fold_data(fold)?;
                let base = self.load_base(fold)?;
                let retrain = self.load_ensemble(fold, EnsembleKind::RetrainEval)?;
                let bootstrap = self.load_ensemble(fold, EnsembleKind::BootstrapEval)?;
                let ctx = EvalContext {
                    base: &base,
                    retrain: &retrain,
                    bootstrap: &bootstrap,
                    train_x: &data.train.x,
                    train_y: &data.train.y,
                    k,
                };
                settings
                    .iter()
                    .map(|s| {
                        let results: Vec<CounterfactualResult> = records
                            .iter()
                            .filter(|r| r.fold == fold && s.same(r))
                            .map(ResultRecord::to_result)
                            .collect();
                        if results.is_empty() {
                            Ok(None)
                        } else {
                            FoldMetrics::evaluate(fold, &ctx, &results).map(Some)
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let dataset = self.dataset_name();
        settings
            .iter()
            .enumerate()
            .map(|(si, s)| {
                let folds: Vec<FoldMetrics> = per_fold.iter().filter_map(|f| f[si].clone()).collect();
                let metrics = MetricsReport::from_folds(&folds)?;
                Ok(ReportRow {
                    method: s.method,
                    dataset: dataset.clone(),
                    gamma: s.gamma,
                    alpha: s.alpha,
                    n_instances: metrics.l1.per_instance.len(),
                    folds,
                    metrics,
                })
            })
            .collect()
    }

    /// The settings a plain run covers: each configured gamma, or the single baseline.
    pub fn default_settings(&self, method: Method) -> Vec<Setting> {
        match method {
            Method::Croce => self
                .config
                .gammas
                .iter()
                .map(|&g| Setting {
                    method,
                    gamma: Some(g),
                    alpha: self.config.generator.alpha,
                })
                .collect(),
            Method::Baseline => vec![Setting {
                method,
                gamma: None,
                alpha: self.config.baseline.lambda,
            }],
        }
    }
}

pub fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r.csv_row())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(&dir.join("report.csv"), &bytes)?;
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(rows)?.as_bytes())
}
