use robcf_core::harness::ExperimentConfig;
use robcf_core::{split_folds, ConditionalFlow, Ensemble};

/// On a Moons fold with the preset flow, the held-out conditional likelihood
/// stays within 0.5 nats of the training mean.
#[test]
fn moons_flow_does_not_grossly_overfit() {
    let cfg = ExperimentConfig::moons();
    let ds = cfg.load_dataset().unwrap();
    let splits = split_folds(ds.n_rows(), cfg.n_folds, cfg.seeds().folds()).unwrap();
    let fold = ds.fold(&splits[0]).unwrap();
    let cons = Ensemble::build_consensus(&fold.train, &cfg.classifier, cfg.ensembles.consensus, 1).unwrap();
    let s_train = cons.consensus(&fold.train.x).unwrap();
    let flow = ConditionalFlow::fit(&fold.train.x, &s_train, &cfg.flow).unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let train = mean(flow.log_prob(&fold.train.x, &s_train).unwrap());
    let s_test = cons.consensus(&fold.test.x).unwrap();
    let test = mean(flow.log_prob(&fold.test.x, &s_test).unwrap());
    assert!(train - test < 0.5, "train {train:.3} test {test:.3}");
}
