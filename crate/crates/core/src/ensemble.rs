//! Bootstrap model collections standing in for samples from the space of
//! admissible retrainings, and the consensus signal computed from them.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClassifierConfig};
use crate::data::{bootstrap_sample, Part};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    /// Bootstrap resamples of the training set; produces the flow's conditioning signal.
    Consensus,
    /// Full training set plus a bootstrap sample of the validation pool.
    RetrainEval,
    /// Bootstrap samples of the validation pool alone.
    BootstrapEval,
}

impl EnsembleKind {
    pub fn default_size(self) -> usize {
        match self {
            EnsembleKind::Consensus => 40,
            EnsembleKind::RetrainEval | EnsembleKind::BootstrapEval => 30,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            EnsembleKind::Consensus => "consensus",
            EnsembleKind::RetrainEval => "retrain_eval",
            EnsembleKind::BootstrapEval => "bootstrap_eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub kind: EnsembleKind,
    pub members: Vec<Classifier>,
    pub seed: u64,
    pub member_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub kind: EnsembleKind,
    pub k: usize,
    pub seed: u64,
    pub member_seeds: Vec<u64>,
    pub data_fingerprint: String,
    pub member_files: Vec<String>,
}

fn train_members(
    k: usize,
    seed: u64,
    config: &ClassifierConfig,
    sample: impl Fn(u64) -> Result<(Tensor, Vec<u8>)> + Sync,
) -> Result<(Vec<Classifier>, Vec<u64>)> {
    if k == 0 {
        return Err(Error::invalid("ensemble size must be >= 1"));
    }
    let seeds: Vec<u64> = (0..k as u64).map(|i| seed.wrapping_add(i)).collect();
    let members = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let wrap = |e: Error| Error::MemberTraining {
                member: i,
                source: Box::new(e),
            };
            let (x, y) = sample(s).map_err(wrap)?;
            Classifier::train(&config.with_seed(s), &x, &y).map_err(wrap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((members, seeds))
}

fn rows_of(part: &Part, idx: &[usize]) -> (Tensor, Vec<u8>) {
    (part.x.select_rows(idx), idx.iter().map(|&i| part.y[i]).collect())
}

impl Ensemble {
    /// Member `k` trains on `bootstrap_sample(train, seed + k)` with init seed `seed + k`.
    pub fn build_consensus(train: &Part, config: &ClassifierConfig, k: usize, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("consensus ensemble needs a non-empty training set"));
        }
        let local: Vec<usize> = (0..train.len()).collect();
        let (members, member_seeds) = train_members(k, seed, config, |s| {
            Ok(rows_of(train, &bootstrap_sample(&local, s)?))
        })?;
        Ok(Self {
            kind: EnsembleKind::Consensus,
            members,
            seed,
            member_seeds,
        })
    }

    /// Each member sees the full training set plus a bootstrap draw of the validation pool.
    pub fn build_retrain_eval(
        train: &Part,
        valpool: &Part,
        config: &ClassifierConfig,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() || valpool.is_empty() {
            return Err(Error::invalid("retrain ensemble needs non-empty train and valpool"));
        }
        let local: Vec<usize> = (0..valpool.len()).collect();
        let (members, member_seeds) = train_members(k, seed, config, |s| {
            let (vx, vy) = rows_of(valpool, &bootstrap_sample(&local, s)?);
            let mut data = train.x.data().to_vec();
            data.extend_from_slice(vx.data());
            let mut y = train.y.clone();
            y.extend(vy);
            Ok((Tensor::matrix(y.len(), train.x.cols(), data)?, y))
        })?;
        Ok(Self {
            kind: EnsembleKind::RetrainEval,
            members,
            seed,
            member_seeds,
        })
    }

    /// Each member sees only a bootstrap draw of the validation pool.
    pub fn build_bootstrap_eval(valpool: &Part, config: &ClassifierConfig, k: usize, seed: u64) -> Result<Self> {
        if valpool.is_empty() {
            return Err(Error::invalid("bootstrap ensemble needs a non-empty valpool"));
        }
        let local: Vec<usize> = (0..valpool.len()).collect();
        let (members, member_seeds) = train_members(k, seed, config, |s| {
            Ok(rows_of(valpool, &bootstrap_sample(&local, s)?))
        })?;
        Ok(Self {
            kind: EnsembleKind::BootstrapEval,
            members,
            seed,
            member_seeds,
        })
    }

    pub fn from_members(kind: EnsembleKind, members: Vec<Classifier>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::invalid("ensemble needs at least one member"));
        };
        let d = first.input_dim();
        if members.iter().any(|m| m.input_dim() != d) {
            return Err(Error::invalid("ensemble members disagree on input dimension"));
        }
        let member_seeds = members.iter().map(|m| m.config.seed).collect();
        Ok(Self {
            kind,
            members,
            seed: 0,
            member_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn member_probs(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        if self.members.is_empty() {
            return Err(Error::invalid("empty ensemble"));
        }
        self.members.par_iter().map(|m| m.predict_proba(x)).collect()
    }

    /// `s(x) = (1/K) sum_k p(y = 1 | x, M_k)`.
    ///
    /// Each row's member probabilities are summed in ascending order, so the
    /// result is bitwise independent of member order.
    pub fn consensus(&self, x: &Tensor) -> Result<Vec<f64>> {
        let probs = self.member_probs(x)?;
        let k = probs.len() as f64;
        let mut column = vec![0.0; probs.len()];
        Ok((0..x.rows())
            .map(|i| {
                for (c, p) in column.iter_mut().zip(&probs) {
                    *c = p[i];
                }
                column.sort_by(f64::total_cmp);
                (column.iter().sum::<f64>() / k).clamp(0.0, 1.0)
            })
            .collect())
    }

    /// Per-row fraction of members predicting `targets[i]`.
    pub fn robustness(&self, x_cf: &Tensor, targets: &[u8]) -> Result<Vec<f64>> {
        if self.kind == EnsembleKind::Consensus {
            return Err(Error::invalid(
                "robustness is measured on evaluation ensembles, not the consensus ensemble",
            ));
        }
        if x_cf.rows() == 0 {
            return Err(Error::invalid("robustness on zero counterfactuals"));
        }
        if x_cf.rows() != targets.len() {
            return Err(Error::invalid("one target class per counterfactual is required"));
        }
        let votes: Vec<Vec<u8>> = self.members.par_iter().map(|m| m.predict(x_cf)).collect::<Result<_>>()?;
        let k = votes.len() as f64;
        Ok((0..targets.len())
            .map(|i| votes.iter().filter(|v| v[i] == targets[i]).count() as f64 / k)
            .collect())
    }

    pub fn save(&self, dir: &Path, data_fingerprint: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut member_files = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i:03}.json");
            m.save(&dir.join(&name))?;
            member_files.push(name);
        }
        let manifest = EnsembleManifest {
            kind: self.kind,
            k: self.members.len(),
            seed: self.seed,
            member_seeds: self.member_seeds.clone(),
            data_fingerprint: data_fingerprint.to_string(),
            member_files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, EnsembleManifest)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)?;
        let members = manifest
            .member_files
            .iter()
            .map(|f| Classifier::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        if members.len() != manifest.k {
            return Err(Error::Artifact {
                path: dir.to_path_buf(),
                reason: format!("manifest lists k={} but {} members", manifest.k, members.len()),
            });
        }
        Ok((
            Self {
                kind: manifest.kind,
                members,
                seed: manifest.seed,
                member_seeds: manifest.member_seeds.clone(),
            },
            manifest,
        ))
    }
}

/// Derives the base seed for an ensemble of `kind` on fold `fold`.
pub fn ensemble_seed(global: u64, kind: EnsembleKind, fold: usize) -> u64 {
    seed::derive(global, kind.dir_name(), fold as u64)
}
