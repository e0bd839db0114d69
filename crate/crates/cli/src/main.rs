use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use robcf_core::harness::{self, ExperimentConfig, Method, ReportRow, Stage, Sweep};
use tracing_subscriber::EnvFilter;

/// Robust counterfactual explanations from ensemble consensus.
#[derive(Parser)]
#[command(name = "robcf", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults to the two-moons setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated robustness levels, replacing the configured list.
    #[arg(long, global = true, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
    /// Density weight (lambda for the baseline).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (artifacts, results and reports).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::Croce)]
    method: MethodArg,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Croce,
    Baseline,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Croce => Method::Croce,
            MethodArg::Baseline => Method::Baseline,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Gamma,
    Alpha,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model and the consensus and evaluation ensembles.
    TrainEnsemble,
    /// Train the consensus-conditioned flow and the class-conditional flow.
    TrainFlow,
    /// Generate counterfactuals for every configured gamma into results.jsonl.
    Generate,
    /// Score results.jsonl and write report.csv and report.json.
    Evaluate,
    /// Gamma or alpha sweep into sweep.csv.
    Sweep {
        #[arg(value_enum)]
        kind: SweepArg,
    },
    /// Full two-moons run (5 folds, gamma 0.7/0.8/0.9) with a check of each report row.
    ReproduceMoons,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::moons(),
    };
    if let Some(g) = &common.gamma {
        cfg.gammas = g.clone();
    }
    if let Some(a) = common.alpha {
        match common.method {
            MethodArg::Croce => cfg.generator.alpha = a,
            MethodArg::Baseline => cfg.baseline.lambda = a,
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_rows(rows: &[ReportRow]) {
    println!("method    gamma  alpha  n     validity  l1      l2      plaus   rob_ret  rob_bs");
    for r in rows {
        let m = &r.metrics;
        let gamma = r.gamma.map_or("-".to_string(), |g| format!("{g:.2}"));
        println!(
            "{:<9} {:<6} {:<6} {:<5} {:<9.3} {:<7.3} {:<7.3} {:<7.3} {:<8.3} {:.3}",
            r.method.as_str(),
            gamma,
            r.alpha,
            r.n_instances,
            m.validity.mean,
            m.l1.mean,
            m.l2.mean,
            m.plausibility.mean,
            m.rob_ret.mean,
            m.rob_bs.mean
        );
    }
}

/// Moons targets: validity 1 +/- 0.01, both robustness rates >= 0.99,
/// mean L1 in [0.30, 0.55], plausibility < 0.06.
fn moons_row_passes(r: &ReportRow) -> bool {
    let m = &r.metrics;
    (m.validity.mean - 1.0).abs() <= 0.01
        && m.rob_ret.mean >= 0.99
        && m.rob_bs.mean >= 0.99
        && (0.30..=0.55).contains(&m.l1.mean)
        && m.plausibility.mean < 0.06
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.common)?;
    let method = Method::from(cli.common.method);
    match cli.command {
        Command::TrainEnsemble => {
            let s = harness::run_stages(&cfg, &Stage::ENSEMBLES)?;
            println!("offline key {} ({} built, {} reused)", s.key, s.built.len(), s.reused.len());
        }
        Command::TrainFlow => {
            let s = harness::run_stages(&cfg, &Stage::FLOWS)?;
            println!("offline key {} ({} built, {} reused)", s.key, s.built.len(), s.reused.len());
        }
        Command::Generate => {
            let records = harness::run_generate(&cfg, method)?;
            println!(
                "{} counterfactuals written to {}",
                records.len(),
                cfg.output_dir.join(harness::RESULTS_FILE).display()
            );
        }
        Command::Evaluate => print_rows(&harness::run_evaluate(&cfg)?),
        Command::Sweep { kind } => {
            let sweep = match kind {
                SweepArg::Gamma => Sweep::Gamma,
                SweepArg::Alpha => Sweep::Alpha,
            };
            let out = harness::run_sweep(&cfg, sweep)?;
            print_rows(&out.reports);
        }
        Command::ReproduceMoons => {
            let out = harness::run_inference(&cfg, Method::Croce)?;
            print_rows(&out.rows);
            let mut all = true;
            for r in &out.rows {
                let ok = moons_row_passes(r);
                all &= ok;
                println!(
                    "gamma {:.2}: {}",
                    r.gamma.unwrap_or(f64::NAN),
                    if ok { "pass" } else { "FAIL" }
                );
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
