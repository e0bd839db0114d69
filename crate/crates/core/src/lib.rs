//! Robust counterfactual explanations driven by ensemble consensus.
//!
//! The offline phase trains a base classifier, bootstrap ensembles and a
//! normalizing flow conditioned on the consensus ensemble's mean class-1
//! probability. The inference phase searches for a sparse perturbation and a
//! consensus level `s` (restricted by the robustness knob `gamma`) that make
//! the perturbed point plausible under the flow.

pub mod cfgen;
pub mod classifier;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod seed;

pub use cfgen::{
    generate_baseline, generate_croce, generate_croce_batch, select_explanation_targets,
    BaselineConfig, CounterfactualResult, CroceConfig, StepRule,
};
pub use classifier::{Architecture, Classifier, ClassifierConfig};
pub use data::{bootstrap_sample, make_moons, split_folds, Dataset, FoldData, FoldSplit, Scaler};
pub use ensemble::{Ensemble, EnsembleKind};
pub use error::{Error, Result};
pub use flow::{ClassConditionalFlow, ConditionalFlow, FlowConfig, MadeLayer};
pub use metrics::{MetricSummary, MetricsReport};
pub use numerics::{Graph, Tensor, Var};
