use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::artifacts::{self, StageManifest};
use super::config::{EnsembleSizes, ExperimentConfig, StageSeeds};
use crate::classifier::{Classifier, ClassifierConfig};
use crate::data::{self, Dataset, FoldData, FoldSplit};
use crate::ensemble::{Ensemble, EnsembleKind};
use crate::error::{Error, Result};
use crate::flow::{ClassConditionalFlow, ConditionalFlow, FlowConfig};

/// Offline training stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Consensus,
    Flow,
    ClassFlow,
    RetrainEval,
    BootstrapEval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Base,
        Stage::Consensus,
        Stage::Flow,
        Stage::ClassFlow,
        Stage::RetrainEval,
        Stage::BootstrapEval,
    ];
    /// What robust generation needs; neither evaluation ensemble is included.
    pub const GENERATION: [Stage; 3] = [Stage::Base, Stage::Consensus, Stage::Flow];
    pub const BASELINE: [Stage; 2] = [Stage::Base, Stage::ClassFlow];
    pub const EVALUATION: [Stage; 3] = [Stage::Base, Stage::RetrainEval, Stage::BootstrapEval];
    pub const ENSEMBLES: [Stage; 4] = [Stage::Base, Stage::Consensus, Stage::RetrainEval, Stage::BootstrapEval];
    pub const FLOWS: [Stage; 2] = [Stage::Flow, Stage::ClassFlow];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Consensus => "consensus",
            Stage::Flow => "flow",
            Stage::ClassFlow => "class_flow",
            Stage::RetrainEval => "retrain_eval",
            Stage::BootstrapEval => "bootstrap_eval",
        }
    }

    fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Flow => &[Stage::Consensus],
            _ => &[],
        }
    }

    /// `stages` plus their dependencies, deduplicated and ordered.
    pub fn closure(stages: &[Stage]) -> Vec<Stage> {
        let mut out: Vec<Stage> = stages
            .iter()
            .flat_map(|s| s.dependencies().iter().copied().chain([*s]))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

const BASE_FILE: &str = "base.json";
const CONSENSUS_VALUES_FILE: &str = "consensus_values.json";
const FLOW_FILE: &str = "flow.json";
const CLASS_FLOW_FILE: &str = "class_flow.json";

/// Everything that determines offline artifacts. Generator settings and gamma
/// lists are deliberately absent.
#[derive(Serialize)]
struct KeyMaterial<'a> {
    version: u32,
    data_fingerprint: &'a str,
    n_folds: usize,
    seed: u64,
    classifier: &'a ClassifierConfig,
    ensembles: &'a EnsembleSizes,
    flow: &'a FlowConfig,
}

#[derive(Serialize, Deserialize)]
struct RootManifest {
    key: String,
    data_fingerprint: String,
    n_folds: usize,
    seed: u64,
    classifier: ClassifierConfig,
    ensembles: EnsembleSizes,
    flow: FlowConfig,
    splits: Vec<FoldSplit>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OfflineSummary {
    pub key: String,
    pub root: PathBuf,
    pub built: Vec<(usize, Stage)>,
    pub reused: Vec<(usize, Stage)>,
}

/// A loaded dataset with its folds and the artifact store keyed by the offline configuration.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub splits: Vec<FoldSplit>,
    pub key: String,
    pub root: PathBuf,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.load_dataset()?;
        let fingerprint = dataset.fingerprint();
        let key = artifacts::sha256_hex(&serde_json::to_vec(&KeyMaterial {
            version: 1,
            data_fingerprint: &fingerprint,
            n_folds: config.n_folds,
            seed: config.seed,
            classifier: &config.classifier,
            ensembles: &config.ensembles,
            flow: &config.flow,
        })?);
        let splits = data::split_folds(dataset.n_rows(), config.n_folds, config.seeds().folds())?;
        let root = config.output_dir.join("offline").join(&key);
        let manifest_path = root.join("manifest.json");
        if !manifest_path.exists() {
            let manifest = RootManifest {
                key: key.clone(),
                data_fingerprint: fingerprint,
                n_folds: config.n_folds,
                seed: config.seed,
                classifier: config.classifier.clone(),
                ensembles: config.ensembles.clone(),
                flow: config.flow.clone(),
                splits: splits.clone(),
            };
            artifacts::write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        }
        Ok(Self {
            config: config.clone(),
            dataset,
            splits,
            key,
            root,
        })
    }

    pub fn dataset_name(&self) -> String {
        self.config.dataset.name()
    }

    pub fn n_folds(&self) -> usize {
        self.splits.len()
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join(format!("fold_{fold}"))
    }

    pub fn fold_data(&self, fold: usize) -> Result<FoldData> {
        self.dataset.fold(&self.splits[fold])
    }

    fn seeds(&self) -> StageSeeds {
        self.config.seeds()
    }

    /// Builds every missing or corrupt stage in `stages` (plus dependencies) on every fold.
    pub fn run_offline(&self, stages: &[Stage]) -> Result<OfflineSummary> {
        let stages = Stage::closure(stages);
        let per_fold: Vec<(Vec<(usize, Stage)>, Vec<(usize, Stage)>)> = (0..self.n_folds())
            .into_par_iter()
            .map(|fold| self.run_fold(fold, &stages))
            .collect::<Result<_>>()?;
        let mut summary = OfflineSummary {
            key: self.key.clone(),
            root: self.root.clone(),
            ..Default::default()
        };
        for (built, reused) in per_fold {
            summary.built.extend(built);
            summary.reused.extend(reused);
        }
        info!(
            key = %self.key,
            built = summary.built.len(),
            reused = summary.reused.len(),
            "offline stages complete"
        );
        Ok(summary)
    }

    fn run_fold(&self, fold: usize, stages: &[Stage]) -> Result<(Vec<(usize, Stage)>, Vec<(usize, Stage)>)> {
        let dir = self.fold_dir(fold);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if dir.join(artifacts::FAILED_MARKER).exists() {
            warn!(fold, "resuming fold after a previous failure");
        }
        let data = self.fold_data(fold)?;
        let (mut built, mut reused) = (Vec::new(), Vec::new());
        for &stage in stages {
            if StageManifest::completed(&dir, stage.name()).is_some() {
                info!(fold, stage = stage.name(), event = "cache_hit", "stage reused");
                reused.push((fold, stage));
                continue;
            }
            info!(fold, stage = stage.name(), event = "train", "building stage");
            if let Err(e) = self.build_stage(fold, stage, &dir, &data) {
                artifacts::mark_failed(&dir, stage.name(), &e)?;
                return Err(e);
            }
            built.push((fold, stage));
        }
        artifacts::clear_failed(&dir)?;
        Ok((built, reused))
    }

    fn build_stage(&self, fold: usize, stage: Stage, dir: &Path, data: &FoldData) -> Result<()> {
        StageManifest::remove(dir, stage.name())?;
        let cfg = &self.config;
        let seeds = self.seeds();
        let fingerprint = self.dataset.fingerprint();
        let (seed, files) = match stage {
            Stage::Base => {
                let s = seeds.base(fold);
                let model = Classifier::train(&cfg.classifier.with_seed(s), &data.train.x, &data.train.y)?;
                info!(
                    fold,
                    train_accuracy = model.train_accuracy.unwrap_or(f64::NAN),
                    test_accuracy = model.accuracy(&data.test.x, &data.test.y)?,
                    "base model trained"
                );
                artifacts::write_atomic(&dir.join(BASE_FILE), model.to_json()?.as_bytes())?;
                (s, vec![BASE_FILE.to_string()])
            }
            Stage::Consensus => {
                let s = seeds.ensemble(EnsembleKind::Consensus, fold);
                let ens = Ensemble::build_consensus(&data.train, &cfg.classifier, cfg.ensembles.consensus, s)?;
                let sub = dir.join(EnsembleKind::Consensus.dir_name());
                ens.save(&sub, &fingerprint)?;
                let values = ens.consensus(&data.train.x)?;
                artifacts::write_atomic(&dir.join(CONSENSUS_VALUES_FILE), serde_json::to_string(&values)?.as_bytes())?;
                let mut files = artifacts::list_files(dir, &sub)?;
                files.push(CONSENSUS_VALUES_FILE.to_string());
                (s, files)
            }
            Stage::Flow => {
                let s = seeds.flow(fold);
                let values = self.load_consensus_values(fold)?;
                let flow = ConditionalFlow::fit(&data.train.x, &values, &FlowConfig { seed: s, ..cfg.flow.clone() })?;
                info!(fold, tau = flow.tau()?, "flow trained");
                artifacts::write_atomic(&dir.join(FLOW_FILE), flow.to_json()?.as_bytes())?;
                // Listing the consensus values ties this stage to the exact inputs it saw.
                (s, vec![FLOW_FILE.to_string(), CONSENSUS_VALUES_FILE.to_string()])
            }
            Stage::ClassFlow => {
                let s = seeds.class_flow(fold);
                // Context is the class label here; smoothing it would mix the classes.
                let fc = FlowConfig {
                    seed: s,
                    context_noise: 0.0,
                    ..cfg.flow.clone()
                };
                let flow = ClassConditionalFlow::fit(&data.train.x, &data.train.y, &fc)?;
                artifacts::write_atomic(&dir.join(CLASS_FLOW_FILE), flow.to_json()?.as_bytes())?;
                (s, vec![CLASS_FLOW_FILE.to_string()])
            }
            Stage::RetrainEval | Stage::BootstrapEval => {
                let kind = if stage == Stage::RetrainEval {
                    EnsembleKind::RetrainEval
                } else {
                    EnsembleKind::BootstrapEval
                };
                let s = seeds.ensemble(kind, fold);
                let k = cfg.ensembles.of(kind);
                let ens = match kind {
                    EnsembleKind::RetrainEval => {
                        Ensemble::build_retrain_eval(&data.train, &data.valpool, &cfg.classifier, k, s)?
                    }
                    _ => Ensemble::build_bootstrap_eval(&data.valpool, &cfg.classifier, k, s)?,
                };
                let sub = dir.join(kind.dir_name());
                ens.save(&sub, &fingerprint)?;
                (s, artifacts::list_files(dir, &sub)?)
            }
        };
        StageManifest::record(dir, stage.name(), Some(seed), &files)?;
        Ok(())
    }

    fn manifest(&self, fold: usize, stage: Stage) -> Result<StageManifest> {
        let dir = self.fold_dir(fold);
        let m = StageManifest::load(&dir, stage.name())?.ok_or_else(|| Error::Artifact {
            path: dir.clone(),
            reason: format!("stage `{}` has not been run", stage.name()),
        })?;
        Ok(m)
    }

    fn read(&self, fold: usize, stage: Stage, rel: &str) -> Result<String> {
        let m = self.manifest(fold, stage)?;
        artifacts::read_verified(&self.fold_dir(fold), &m, rel)
    }

    pub fn load_base(&self, fold: usize) -> Result<Classifier> {
        Classifier::from_json(&self.read(fold, Stage::Base, BASE_FILE)?)
    }

    pub fn load_consensus_values(&self, fold: usize) -> Result<Vec<f64>> {
        Ok(serde_json::from_str(&self.read(fold, Stage::Consensus, CONSENSUS_VALUES_FILE)?)?)
    }

    pub fn load_flow(&self, fold: usize) -> Result<ConditionalFlow> {
        ConditionalFlow::from_json(&self.read(fold, Stage::Flow, FLOW_FILE)?)
    }

    pub fn load_class_flow(&self, fold: usize) -> Result<ClassConditionalFlow> {
        ClassConditionalFlow::from_json(&self.read(fold, Stage::ClassFlow, CLASS_FLOW_FILE)?)
    }

    pub fn load_ensemble(&self, fold: usize, kind: EnsembleKind) -> Result<Ensemble> {
        let stage = match kind {
            EnsembleKind::Consensus => Stage::Consensus,
            EnsembleKind::RetrainEval => Stage::RetrainEval,
            EnsembleKind::BootstrapEval => Stage::BootstrapEval,
        };
        let dir = self.fold_dir(fold);
        self.manifest(fold, stage)?.verify(&dir)?;
        Ok(Ensemble::load(&dir.join(kind.dir_name()))?.0)
    }
}
