use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfgen::{BaselineConfig, CroceConfig, StepRule};
use crate::classifier::ClassifierConfig;
use crate::data::{self, CsvOptions, Dataset};
use crate::ensemble::EnsembleKind;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Moons {
        #[serde(default = "default_moons_n")]
        n: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        positive_label: String,
        #[serde(default)]
        drop_columns: Vec<String>,
    },
}

fn default_moons_n() -> usize {
    1024
}

fn default_moons_noise() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Moons { .. } => "moons".to_string(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSizes {
    pub consensus: usize,
    pub retrain_eval: usize,
    pub bootstrap_eval: usize,
}

impl Default for EnsembleSizes {
    fn default() -> Self {
        Self {
            consensus: EnsembleKind::Consensus.default_size(),
            retrain_eval: EnsembleKind::RetrainEval.default_size(),
            bootstrap_eval: EnsembleKind::BootstrapEval.default_size(),
        }
    }
}

impl EnsembleSizes {
    pub fn of(&self, kind: EnsembleKind) -> usize {
        match kind {
            EnsembleKind::Consensus => self.consensus,
            EnsembleKind::RetrainEval => self.retrain_eval,
            EnsembleKind::BootstrapEval => self.bootstrap_eval,
        }
    }
}

/// Generator settings shared by every gamma of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub alpha: f64,
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: StepRule,
    pub clamp_cf: bool,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        let d = CroceConfig::default();
        Self {
            alpha: d.alpha,
            steps: d.steps,
            step_size: d.step_size,
            optimizer: d.optimizer,
            clamp_cf: d.clamp_cf,
        }
    }
}

impl GeneratorSettings {
    pub fn croce(&self, gamma: f64, alpha: f64) -> CroceConfig {
        CroceConfig {
            gamma,
            alpha,
            steps: self.steps,
            step_size: self.step_size,
            optimizer: self.optimizer,
            clamp_cf: self.clamp_cf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub n_folds: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub ensembles: EnsembleSizes,
    pub flow: FlowConfig,
    pub generator: GeneratorSettings,
    pub baseline: BaselineConfig,
    pub gammas: Vec<f64>,
    pub gamma_sweep: Vec<f64>,
    pub alpha_sweep: Vec<f64>,
    pub alpha_sweep_gamma: f64,
    pub knn_k: usize,
    /// Explain at most this many test rows per fold (first rows of the fold's test part).
    pub max_test_instances: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Moons {
                n: default_moons_n(),
                noise: default_moons_noise(),
            },
            n_folds: 5,
            seed: 0,
            classifier: ClassifierConfig::default(),
            ensembles: EnsembleSizes::default(),
            flow: FlowConfig::default(),
            generator: GeneratorSettings::default(),
            baseline: BaselineConfig::default(),
            gammas: vec![0.7, 0.8, 0.9],
            gamma_sweep: (0..9).map(|i| 0.55 + 0.05 * i as f64).map(round2).collect(),
            alpha_sweep: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            alpha_sweep_gamma: 0.7,
            knn_k: crate::metrics::DEFAULT_KNN,
            max_test_instances: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

pub const MOONS_CONTEXT_NOISE: f64 = 0.25;
pub const DIABETES_CLASSIFIER_EPOCHS: usize = 50;
pub const DIABETES_DEQUANTIZATION_NOISE: f64 = 0.05;

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn check_gamma(what: &str, g: f64) -> Result<()> {
    if g > 0.0 && g <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}: gamma {g} is outside (0, 1]")))
    }
}

impl ExperimentConfig {
    /// Two-moons setup with the default protocol. Consensus on moons is
    /// almost binary, so the flow smooths its context (see
    /// [`FlowConfig::context_noise`]).
    pub fn moons() -> Self {
        let mut cfg = Self::default();
        cfg.flow.context_noise = MOONS_CONTEXT_NOISE;
        cfg
    }

    /// Pima diabetes CSV (`Outcome` label, 1 = positive).
    ///
    /// The MLP trains for [`DIABETES_CLASSIFIER_EPOCHS`] (best validation-pool
    /// accuracy). The flow dequantizes the many zero-coded entries and trains
    /// for the full schedule, since a 10% holdout is only about 31 rows.
    pub fn diabetes(path: impl Into<PathBuf>) -> Self {
        let mut cfg = Self {
            dataset: DatasetSpec::Csv {
                path: path.into(),
                label_column: "Outcome".to_string(),
                positive_label: "1".to_string(),
                drop_columns: Vec::new(),
            },
            ..Self::default()
        };
        cfg.classifier.epochs = DIABETES_CLASSIFIER_EPOCHS;
        cfg.flow.dequantization_noise = DIABETES_DEQUANTIZATION_NOISE;
        cfg.flow.validation_fraction = 0.0;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses a TOML file; a relative CSV path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let DatasetSpec::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    let joined = dir.join(&*data);
                    if joined.exists() {
                        *data = joined;
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::Config("at least one gamma is required".into()));
        }
        for &g in &self.gammas {
            check_gamma("gammas", g)?;
        }
        for &g in &self.gamma_sweep {
            check_gamma("gamma_sweep", g)?;
        }
        check_gamma("alpha_sweep_gamma", self.alpha_sweep_gamma)?;
        if self.alpha_sweep.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("alpha_sweep values must be finite and >= 0".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be >= 2".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be >= 1".into()));
        }
        if self.max_test_instances == Some(0) {
            return Err(Error::Config("max_test_instances must be >= 1 when set".into()));
        }
        for kind in [EnsembleKind::Consensus, EnsembleKind::RetrainEval, EnsembleKind::BootstrapEval] {
            if self.ensembles.of(kind) == 0 {
                return Err(Error::Config(format!("{} ensemble size must be >= 1", kind.dir_name())));
            }
        }
        match &self.dataset {
            DatasetSpec::Moons { n, noise } => {
                if *n < 25 || !(*noise >= 0.0) {
                    return Err(Error::Config("moons needs n >= 25 and noise >= 0".into()));
                }
            }
            DatasetSpec::Csv { path, .. } => {
                if !path.exists() {
                    return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
                }
            }
        }
        self.classifier.validate()?;
        self.flow.validate()?;
        self.generator.croce(self.gammas[0], self.generator.alpha).validate()?;
        self.baseline.validate()?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Moons { n, noise } => data::make_moons(*n, *noise, self.seeds().moons()),
            DatasetSpec::Csv {
                path,
                label_column,
                positive_label,
                drop_columns,
            } => data::load_csv(
                path,
                &CsvOptions {
                    label_column: label_column.clone(),
                    positive_label: positive_label.clone(),
                    drop_columns: drop_columns.clone(),
                },
            ),
        }
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds(self.seed)
    }
}

/// Every stage seed is derived from the single global seed.
#[derive(Clone, Copy, Debug)]
pub struct StageSeeds(pub u64);

impl StageSeeds {
    pub fn moons(self) -> u64 {
        seed::derive(self.0, "moons", 0)
    }

    pub fn folds(self) -> u64 {
        seed::derive(self.0, "folds", 0)
    }

    pub fn base(self, fold: usize) -> u64 {
        seed::derive(self.0, "base", fold as u64)
    }

    pub fn ensemble(self, kind: EnsembleKind, fold: usize) -> u64 {
        crate::ensemble::ensemble_seed(self.0, kind, fold)
    }

    pub fn flow(self, fold: usize) -> u64 {
        seed::derive(self.0, "flow", fold as u64)
    }

    pub fn class_flow(self, fold: usize) -> u64 {
        seed::derive(self.0, "class-flow", fold as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::moons();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.gamma_sweep.len(), 9);
        assert_eq!(cfg.gamma_sweep[0], 0.55);
        assert_eq!(cfg.gamma_sweep[8], 0.95);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\ngammas = [0.9]\n[flow]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gammas, vec![0.9]);
        assert_eq!(cfg.flow.epochs, 3);
        assert_eq!(cfg.flow.hidden, FlowConfig::default().hidden);
        assert_eq!(cfg.ensembles.consensus, 40);
    }

    #[test]
    fn rejects_bad_gamma_and_unknown_keys() {
        let mut cfg = ExperimentConfig::moons();
        cfg.gammas = vec![0.0];
        assert!(cfg.validate().is_err());
        cfg.gammas = vec![];
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("gama = [0.7]").is_err());
    }

    #[test]
    fn missing_csv_is_rejected() {
        let cfg = ExperimentConfig::diabetes("/nonexistent/diabetes.csv");
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_seeds_differ() {
        let s = StageSeeds(1);
        let all = [s.moons(), s.folds(), s.base(0), s.base(1), s.flow(0), s.class_flow(0)];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(StageSeeds(2).base(0), s.base(0));
    }
}
