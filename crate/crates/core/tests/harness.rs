use std::fs;
use std::path::Path;

use robcf_core::harness::{
    self, read_results, ExperimentConfig, Method, Stage, StageManifest, Sweep, FAILED_MARKER, RESULTS_FILE,
};
use robcf_core::{ClassifierConfig, FlowConfig};

/// Small enough to run the whole pipeline in a few seconds.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::moons();
    cfg.dataset = robcf_core::harness::DatasetSpec::Moons { n: 200, noise: 0.1 };
    cfg.n_folds = 2;
    cfg.classifier = ClassifierConfig {
        hidden_sizes: vec![8],
        epochs: 5,
        ..ClassifierConfig::default()
    };
    cfg.ensembles.consensus = 3;
    cfg.ensembles.retrain_eval = 2;
    cfg.ensembles.bootstrap_eval = 2;
    cfg.flow = FlowConfig {
        n_layers: 2,
        hidden: 8,
        epochs: 3,
        batch_size: 16,
        ..cfg.flow
    };
    cfg.generator.steps = 20;
    cfg.baseline.steps = 20;
    cfg.gammas = vec![0.7, 0.9];
    cfg.max_test_instances = Some(10);
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn rerun_is_a_cache_hit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = harness::run_offline(&cfg).unwrap();
    assert_eq!(first.built.len(), 2 * Stage::ALL.len());
    assert!(first.reused.is_empty());
    let second = harness::run_offline(&cfg).unwrap();
    assert!(second.built.is_empty());
    assert_eq!(second.reused.len(), 2 * Stage::ALL.len());
    assert_eq!(first.key, second.key);
}

#[test]
fn gamma_changes_reuse_the_offline_phase() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    let out = harness::run_inference(&cfg, Method::Croce).unwrap();
    assert_eq!(out.rows.len(), 2);
    assert_eq!(out.records.len(), 2 * 2 * 10);
    let flow_hash = |c: &ExperimentConfig| {
        let exp = harness::Experiment::prepare(c).unwrap();
        harness::sha256_file(&exp.fold_dir(0).join("flow.json")).unwrap()
    };
    let before = flow_hash(&cfg);

    cfg.gammas = vec![0.8];
    cfg.generator.alpha = 2.0;
    let used: Vec<Stage> = Stage::GENERATION.into_iter().chain(Stage::EVALUATION).collect();
    let summary = harness::run_stages(&cfg, &used).unwrap();
    assert!(summary.built.is_empty());
    let out = harness::run_inference(&cfg, Method::Croce).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(flow_hash(&cfg), before);

    cfg.flow.epochs = 4;
    let exp = harness::Experiment::prepare(&cfg).unwrap();
    assert_ne!(exp.key, summary.key);
}

#[test]
fn failed_stage_is_marked_and_resumed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    // Training needs 2 x batch_size rows, so this flow stage fails after the ensembles.
    cfg.flow.batch_size = 500;
    let exp = harness::Experiment::prepare(&cfg).unwrap();
    assert!(exp.run_offline(&Stage::GENERATION).is_err());
    let fold = exp.fold_dir(0);
    let marker = fs::read_to_string(fold.join(FAILED_MARKER)).unwrap();
    assert!(marker.contains("stage: flow"));
    assert!(StageManifest::completed(&fold, "consensus").is_some());

    // The flow config is part of the key, so resume under the same key by
    // editing the stored config only for training.
    let fixed = harness::Experiment {
        config: ExperimentConfig {
            flow: FlowConfig {
                batch_size: 16,
                ..cfg.flow.clone()
            },
            ..cfg.clone()
        },
        ..exp
    };
    let summary = fixed.run_offline(&Stage::GENERATION).unwrap();
    assert!(summary.reused.contains(&(0, Stage::Consensus)));
    assert!(summary.built.contains(&(0, Stage::Flow)));
    assert!(!fold.join(FAILED_MARKER).exists());
}

#[test]
fn tampered_artifact_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let exp = harness::Experiment::prepare(&cfg).unwrap();
    exp.run_offline(&[Stage::Base]).unwrap();
    let base = exp.fold_dir(1).join("base.json");
    let mut text = fs::read_to_string(&base).unwrap();
    text.push(' ');
    fs::write(&base, text).unwrap();
    assert!(exp.load_base(1).is_err());
    let s = exp.run_offline(&[Stage::Base]).unwrap();
    assert_eq!(s.built, vec![(1, Stage::Base)]);
    exp.load_base(1).unwrap();
}

#[test]
fn generation_never_needs_the_evaluation_ensembles() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let exp = harness::Experiment::prepare(&cfg).unwrap();
    exp.run_offline(&Stage::ALL).unwrap();
    let first = exp.generate(&exp.default_settings(Method::Croce)).unwrap();
    for fold in 0..2 {
        let d = exp.fold_dir(fold);
        for stage in ["retrain_eval", "bootstrap_eval"] {
            fs::remove_dir_all(d.join(stage)).unwrap();
            StageManifest::remove(&d, stage).unwrap();
        }
    }
    fs::remove_dir_all(exp.root.join("fold_0/stages"))
        .and_then(|_| fs::create_dir(exp.root.join("fold_0/stages")))
        .unwrap();
    // Fold 0 retrains base, consensus and flow from scratch; fold 1 reuses them.
    let again = exp.generate(&exp.default_settings(Method::Croce)).unwrap();
    assert_eq!(first, again);
    for fold in 0..2 {
        assert!(!exp.fold_dir(fold).join("retrain_eval").exists());
    }
}

#[test]
fn results_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run_inference(&tiny(a.path()), Method::Croce).unwrap();
    harness::run_inference(&tiny(b.path()), Method::Croce).unwrap();
    let read = |d: &Path| fs::read(d.join(RESULTS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(fs::read(a.path().join("report.csv")).unwrap(), fs::read(b.path().join("report.csv")).unwrap());
}

#[test]
fn different_seed_changes_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut other = tiny(b.path());
    other.seed = 1;
    let ra = harness::run_generate(&tiny(a.path()), Method::Croce).unwrap();
    let rb = harness::run_generate(&other, Method::Croce).unwrap();
    assert_ne!(ra, rb);
}

#[test]
fn baseline_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let records = harness::run_generate(&cfg, Method::Baseline).unwrap();
    assert!(records.iter().all(|r| r.gamma.is_none() && r.method == Method::Baseline));
    assert_eq!(read_results(&dir.path().join(RESULTS_FILE)).unwrap(), records);
    let rows = harness::run_evaluate(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in ["validity", "l1", "l2", "plausibility", "rob_ret", "rob_bs"] {
        assert!(header.split(',').any(|h| h == col), "missing column {col}");
    }
    let m = &rows[0].metrics;
    for v in [m.validity.mean, m.rob_ret.mean, m.rob_bs.mean] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn sweeps_emit_per_fold_and_mean_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.gamma_sweep = vec![0.6, 0.8];
    cfg.alpha_sweep = vec![1.0, 3.0, 9.0];
    let g = harness::run_sweep(&cfg, Sweep::Gamma).unwrap();
    assert_eq!(g.rows.len(), 2 * 3);
    assert_eq!(g.rows.iter().filter(|r| r.fold == "mean").count(), 2);
    let a = harness::run_sweep(&cfg, Sweep::Alpha).unwrap();
    assert_eq!(a.rows.iter().filter(|r| r.fold == "mean").count(), 3);
    assert!(a.rows.iter().all(|r| r.gamma == cfg.alpha_sweep_gamma));
    let text = fs::read_to_string(dir.path().join(harness::SWEEP_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
}

#[test]
fn toml_config_with_relative_csv_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/heloc_shaped.csv"),
        dir.path().join("h.csv"),
    )
    .unwrap();
    let path = dir.path().join("cfg.toml");
    fs::write(
        &path,
        "[dataset]\nkind = \"csv\"\npath = \"h.csv\"\nlabel_column = \"RiskPerformance\"\npositive_label = \"Good\"\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.load_dataset().unwrap().n_features(), 23);
    assert_eq!(cfg.dataset.name(), "h");
}
