//! Experiment orchestration: the offline phase (base model, ensembles, flows)
//! with a content-addressed artifact cache, and the inference phase
//! (generation, evaluation, sweeps) that only reads those artifacts.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! offline/<key>/manifest.json
//! offline/<key>/fold_<k>/{base.json, consensus/, consensus_values.json, flow.json,
//!                         class_flow.json, retrain_eval/, bootstrap_eval/, stages/, FAILED?}
//! results.jsonl  report.csv  report.json  sweep.csv
//! ```
//!
//! `<key>` hashes the dataset fingerprint and every offline-relevant setting,
//! so changing only gammas, alphas or generator settings reuses all training.

mod artifacts;
mod config;
mod inference;
mod offline;

use std::path::Path;

use serde::Serialize;
use tracing::info;

pub use artifacts::{sha256_file, StageManifest, FAILED_MARKER};
pub use config::{DatasetSpec, EnsembleSizes, ExperimentConfig, GeneratorSettings, StageSeeds};
pub use inference::{read_results, write_report, write_results, Method, ReportRow, ResultRecord, Setting};
pub use offline::{Experiment, OfflineSummary, Stage};

use crate::error::{Error, Result};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Trains (or reuses) every offline artifact.
pub fn run_offline(config: &ExperimentConfig) -> Result<OfflineSummary> {
    Experiment::prepare(config)?.run_offline(&Stage::ALL)
}

/// Trains (or reuses) the given stages and their dependencies.
pub fn run_stages(config: &ExperimentConfig, stages: &[Stage]) -> Result<OfflineSummary> {
    Experiment::prepare(config)?.run_offline(stages)
}

/// Generation only: writes `results.jsonl` for every configured gamma (or the baseline).
pub fn run_generate(config: &ExperimentConfig, method: Method) -> Result<Vec<ResultRecord>> {
    let exp = Experiment::prepare(config)?;
    let records = exp.generate(&exp.default_settings(method))?;
    write_results(&config.output_dir.join(RESULTS_FILE), &records)?;
    Ok(records)
}

/// Scores an existing `results.jsonl` in `output_dir`; writes `report.csv` and `report.json`.
pub fn run_evaluate(config: &ExperimentConfig) -> Result<Vec<ReportRow>> {
    let exp = Experiment::prepare(config)?;
    let records = read_results(&config.output_dir.join(RESULTS_FILE))?;
    let rows = exp.evaluate(&records)?;
    write_report(&config.output_dir, &rows)?;
    for r in &rows {
        log_row(r);
    }
    Ok(rows)
}

pub struct InferenceOutput {
    pub rows: Vec<ReportRow>,
    pub records: Vec<ResultRecord>,
}

/// Generation and evaluation for every configured gamma (or the baseline);
/// writes `results.jsonl`, `report.csv` and `report.json` to `output_dir`.
pub fn run_inference(config: &ExperimentConfig, method: Method) -> Result<InferenceOutput> {
    let exp = Experiment::prepare(config)?;
    let records = exp.generate(&exp.default_settings(method))?;
    let rows = exp.evaluate(&records)?;
    write_results(&config.output_dir.join(RESULTS_FILE), &records)?;
    write_report(&config.output_dir, &rows)?;
    for r in &rows {
        log_row(r);
    }
    Ok(InferenceOutput { rows, records })
}

pub fn log_row(r: &ReportRow) {
    let m = &r.metrics;
    info!(
        method = r.method.as_str(),
        dataset = %r.dataset,
        gamma = r.gamma.unwrap_or(f64::NAN),
        alpha = r.alpha,
        validity = m.validity.mean,
        l1 = m.l1.mean,
        l2 = m.l2.mean,
        plausibility = m.plausibility.mean,
        rob_ret = m.rob_ret.mean,
        rob_bs = m.rob_bs.mean,
        "report"
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Gamma,
    Alpha,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Sweep::Gamma),
            "alpha" => Ok(Sweep::Alpha),
            other => Err(Error::Config(format!("unknown sweep `{other}` (expected gamma or alpha)"))),
        }
    }
}

/// One line of `sweep.csv`: a fold's means, or with `fold = "mean"` the aggregate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep: &'static str,
    pub value: f64,
    pub fold: String,
    pub gamma: f64,
    pub alpha: f64,
    pub n: usize,
    pub validity: f64,
    pub l1: f64,
    pub l2: f64,
    pub plausibility: f64,
    pub rob_ret: f64,
    pub rob_bs: f64,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<ReportRow>,
}

/// Gamma sweep over `gamma_sweep` at the configured alpha, or alpha sweep over
/// `alpha_sweep` at `alpha_sweep_gamma`; writes `sweep.csv`.
pub fn run_sweep(config: &ExperimentConfig, sweep: Sweep) -> Result<SweepOutput> {
    let exp = Experiment::prepare(config)?;
    let (name, settings): (&'static str, Vec<Setting>) = match sweep {
        Sweep::Gamma => (
            "gamma",
            config
                .gamma_sweep
                .iter()
                .map(|&g| Setting {
                    method: Method::Croce,
                    gamma: Some(g),
                    alpha: config.generator.alpha,
                })
                .collect(),
        ),
        Sweep::Alpha => (
            "alpha",
            config
                .alpha_sweep
                .iter()
                .map(|&a| Setting {
                    method: Method::Croce,
                    gamma: Some(config.alpha_sweep_gamma),
                    alpha: a,
                })
                .collect(),
        ),
    };
    if settings.is_empty() {
        return Err(Error::Config(format!("{name} sweep has no values")));
    }
    let records = exp.generate(&settings)?;
    let reports = exp.evaluate(&records)?;
    let mut rows = Vec::new();
    for r in &reports {
        let gamma = r.gamma.expect("robust setting");
        let value = if sweep == Sweep::Gamma { gamma } else { r.alpha };
        let row = |fold: String, n: usize, m: [f64; 6]| SweepRow {
            sweep: name,
            value,
            fold,
            gamma,
            alpha: r.alpha,
            n,
            validity: m[0],
            l1: m[1],
            l2: m[2],
            plausibility: m[3],
            rob_ret: m[4],
            rob_bs: m[5],
        };
        for f in &r.folds {
            rows.push(row(f.fold.to_string(), f.l1.len(), f.means()));
        }
        rows.push(row("mean".into(), r.n_instances, r.metrics.columns().map(|c| c.mean)));
        log_row(r);
    }
    write_sweep(&config.output_dir.join(SWEEP_FILE), &rows)?;
    Ok(SweepOutput { rows, reports })
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    artifacts::write_atomic(path, &bytes)
}
