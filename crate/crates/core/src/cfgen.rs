//! Counterfactual generators.
//!
//! The robust generator minimizes, jointly over a perturbation `delta` and a
//! consensus level `s`,
//!
//! ```text
//! L(delta, s) = |delta|_1 + alpha * max(0, tau - log p(x0 + delta | s))
//! ```
//!
//! with `s` projected after every step onto `[gamma, 1]` when the target is
//! class 1 and onto `[0, 1 - gamma]` when it is class 0. Both variables are
//! updated from the same evaluation of `L`.
//!
//! Each instance's objective only involves its own row, so a batch of
//! instances is optimized in one graph whose root is the sum of per-instance
//! objectives; the per-row gradients are exactly the per-instance gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::flow::{ClassConditionalFlow, ConditionalFlow};
use crate::numerics::{Adam, Graph, Tensor};

/// Instances per optimization graph. Fixed so that results do not depend on
/// the number of worker threads.
pub const BATCH_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `v <- v - eta * grad`. Unstable on trained flows whose log-density is
    /// steep far from the data.
    PlainGd,
    /// Adam moments over `(delta, s)`, step `eta`; the default.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CroceConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: StepRule,
    /// Project `x0 + delta` onto `[0, 1]^d` after each step.
    pub clamp_cf: bool,
}

impl Default for CroceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            alpha: 5.0,
            steps: 2000,
            step_size: 1e-2,
            optimizer: StepRule::Adam,
            clamp_cf: false,
        }
    }
}

impl CroceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        // alpha = 0 is accepted: it degenerates to the pure L1 objective.
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step_size must be > 0"));
        }
        Ok(())
    }

    /// Feasible interval for `s` given the target class.
    pub fn s_bounds(&self, target: u8) -> (f64, f64) {
        if target == 1 {
            (self.gamma, 1.0)
        } else {
            (0.0, 1.0 - self.gamma)
        }
    }

    pub fn s_init(&self, target: u8) -> f64 {
        if target == 1 {
            self.gamma
        } else {
            1.0 - self.gamma
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Smallest value on {0.1, 0.25, 0.5, 1, 2, 5, 10} with validity >= 0.99
    /// on both Moons and Diabetes.
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    pub optimizer: StepRule,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            steps: 2000,
            step_size: 1e-2,
            optimizer: StepRule::Adam,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.steps == 0 || !(self.step_size > 0.0) {
            return Err(Error::invalid("baseline needs steps >= 1 and step_size > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub x0: Vec<f64>,
    pub delta: Vec<f64>,
    pub x_cf: Vec<f64>,
    /// Final consensus variable; for the class-conditional baseline, the target class.
    pub s_star: f64,
    pub target_class: u8,
    /// `None` for the baseline, which has no robustness knob.
    pub gamma: Option<f64>,
    /// Density weight (alpha for the robust generator, lambda for the baseline).
    pub alpha: f64,
    /// Objective at the start of each step.
    pub loss_trace: Vec<f64>,
    /// `s` after each step's projection.
    pub s_trace: Vec<f64>,
    /// Objective at the returned state.
    pub final_loss: f64,
    pub hinge_active: bool,
}

impl CounterfactualResult {
    pub fn l1(&self) -> f64 {
        self.delta.iter().map(|v| v.abs()).sum()
    }

    pub fn l2(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Every test instance is explained toward the class opposite its prediction.
pub fn select_explanation_targets(classifier: &Classifier, x_test: &Tensor) -> Result<Vec<(Vec<f64>, u8)>> {
    let pred = classifier.predict(x_test)?;
    Ok(pred
        .into_iter()
        .enumerate()
        .map(|(i, p)| (x_test.row_slice(i).to_vec(), 1 - p))
        .collect())
}

fn stack(instances: &[(Vec<f64>, u8)], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(instances.len() * dim);
    for (x, _) in instances {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "counterfactual instance",
                left: vec![x.len()],
                right: vec![dim],
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("instance contains non-finite values"));
        }
        data.extend_from_slice(x);
    }
    Tensor::matrix(instances.len(), dim, data)
}

/// Shared projected-gradient loop state for a batch.
struct Batch {
    delta: Tensor,
    s: Tensor,
    traces: Vec<Vec<f64>>,
    s_traces: Vec<Vec<f64>>,
    adam: Option<Adam>,
}

impl Batch {
    fn new(n: usize, d: usize, s0: Vec<f64>, steps: usize, rule: StepRule) -> Self {
        let delta = Tensor::zeros(&[n, d]);
        let s = Tensor::column(&s0);
        let adam = match rule {
            StepRule::PlainGd => None,
            StepRule::Adam => Some(Adam::new(&[delta.shape(), s.shape()])),
        };
        Self {
            delta,
            s,
            traces: vec![Vec::with_capacity(steps); n],
            s_traces: vec![Vec::with_capacity(steps); n],
            adam,
        }
    }

    fn record(&mut self, per_instance: &Tensor, step: usize) -> Result<()> {
        for (i, &v) in per_instance.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            self.traces[i].push(v);
        }
        Ok(())
    }

    fn update(&mut self, g_delta: Option<Tensor>, g_s: Option<Tensor>, lr: f64) {
        let g_delta = g_delta.unwrap_or_else(|| Tensor::zeros(self.delta.shape()));
        let g_s = g_s.unwrap_or_else(|| Tensor::zeros(self.s.shape()));
        match &mut self.adam {
            None => {
                for (v, g) in self.delta.data_mut().iter_mut().zip(g_delta.data()) {
                    *v -= lr * g;
                }
                for (v, g) in self.s.data_mut().iter_mut().zip(g_s.data()) {
                    *v -= lr * g;
                }
            }
            Some(adam) => adam.step(&mut [&mut self.delta, &mut self.s], &[&g_delta, &g_s], lr),
        }
    }
}

/// Robust counterfactuals for a batch of `(x0, target_class)` pairs, optimized together.
pub fn generate_croce_batch(
    flow: &ConditionalFlow,
    instances: &[(Vec<f64>, u8)],
    config: &CroceConfig,
) -> Result<Vec<CounterfactualResult>> {
    config.validate()?;
    let tau = flow.tau()?;
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let d = flow.dim;
    let x0 = stack(instances, d)?;
    let n = instances.len();
    let bounds: Vec<(f64, f64)> = instances.iter().map(|(_, c)| config.s_bounds(*c)).collect();
    let s0 = instances.iter().map(|(_, c)| config.s_init(*c)).collect();
    let mut st = Batch::new(n, d, s0, config.steps, config.optimizer);

    for step in 0..config.steps {
        let (per, g_delta, g_s) = {
            let mut g = Graph::new();
            let dv = g.param_ref(&st.delta);
            let sv = g.param_ref(&st.s);
            let xv = g.constant_ref(&x0);
            let x = g.add(xv, dv)?;
            let lp = flow.log_prob_node(&mut g, x, sv)?;
            let neg = g.scale(lp, -1.0);
            let gap = g.offset(neg, tau);
            let hinge = g.relu(gap);
            let weighted = g.scale(hinge, config.alpha);
            let ad = g.abs(dv);
            let l1 = g.sum_cols(ad);
            let per = g.add(l1, weighted)?;
            let root = g.sum(per);
            let per_values = g.value(per).clone();
            if !g.value(root).item().is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut grads = g.backward(root)?;
            (per_values, grads.take(dv), grads.take(sv))
        };
        st.record(&per, step)?;
        st.update(g_delta, g_s, config.step_size);
        for (i, v) in st.s.data_mut().iter_mut().enumerate() {
            *v = v.clamp(bounds[i].0, bounds[i].1);
            st.s_traces[i].push(*v);
        }
        if config.clamp_cf {
            for (k, v) in st.delta.data_mut().iter_mut().enumerate() {
                let x = x0.data()[k];
                *v = (x + *v).clamp(0.0, 1.0) - x;
            }
        }
    }

    let x_cf = x0.add(&st.delta)?;
    let s_final = st.s.data().to_vec();
    let lp = flow.log_prob(&x_cf, &s_final)?;
    let Batch {
        delta, traces, s_traces, ..
    } = st;
    Ok((0..n)
        .zip(traces.into_iter().zip(s_traces))
        .map(|(i, (loss_trace, s_trace))| {
            let delta_i = delta.row_slice(i).to_vec();
            let l1: f64 = delta_i.iter().map(|v| v.abs()).sum();
            let hinge = (tau - lp[i]).max(0.0);
            CounterfactualResult {
                x0: instances[i].0.clone(),
                x_cf: x_cf.row_slice(i).to_vec(),
                delta: delta_i,
                s_star: s_final[i],
                target_class: instances[i].1,
                gamma: Some(config.gamma),
                alpha: config.alpha,
                loss_trace,
                s_trace,
                final_loss: if hinge > 0.0 { l1 + config.alpha * hinge } else { l1 },
                hinge_active: hinge > 0.0,
            }
        })
        .collect())
}

/// Robust counterfactual for a single instance.
pub fn generate_croce(
    flow: &ConditionalFlow,
    x0: &[f64],
    target_class: u8,
    config: &CroceConfig,
) -> Result<CounterfactualResult> {
    let mut out = generate_croce_batch(flow, &[(x0.to_vec(), target_class)], config)?;
    Ok(out.remove(0))
}

/// Runs [`generate_croce_batch`] over fixed-size chunks in parallel; output keeps input order.
pub fn generate_croce_many(
    flow: &ConditionalFlow,
    instances: &[(Vec<f64>, u8)],
    config: &CroceConfig,
) -> Result<Vec<CounterfactualResult>> {
    let chunks: Vec<Vec<CounterfactualResult>> = instances
        .par_chunks(BATCH_CHUNK)
        .map(|c| generate_croce_batch(flow, c, config))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Non-robust plausible baseline for a batch:
/// `|delta|_1 + lambda * (BCE(M(x'), c') + max(0, tau_c' - log p(x' | c')))`.
pub fn generate_baseline_batch(
    flow: &ClassConditionalFlow,
    classifier: &Classifier,
    instances: &[(Vec<f64>, u8)],
    config: &BaselineConfig,
) -> Result<Vec<CounterfactualResult>> {
    config.validate()?;
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let d = flow.flow.dim;
    if classifier.input_dim() != d {
        return Err(Error::invalid("classifier and flow disagree on dimension"));
    }
    let x0 = stack(instances, d)?;
    let n = instances.len();
    let targets: Vec<f64> = instances.iter().map(|(_, c)| f64::from(*c)).collect();
    let c_col = Tensor::column(&targets);
    let tau_col = Tensor::column(&instances.iter().map(|(_, c)| flow.tau[*c as usize]).collect::<Vec<_>>());
    let mut st = Batch::new(n, d, targets.clone(), config.steps, config.optimizer);

    for step in 0..config.steps {
        let (per, g_delta) = {
            let mut g = Graph::new();
            let dv = g.param_ref(&st.delta);
            let xv = g.constant_ref(&x0);
            let cv = g.constant_ref(&c_col);
            let tv = g.constant_ref(&tau_col);
            let x = g.add(xv, dv)?;
            let lp = flow.flow.log_prob_node(&mut g, x, cv)?;
            let gap = g.sub(tv, lp)?;
            let hinge = g.relu(gap);
            let logit = classifier.logit_node(&mut g, x)?;
            let sp = g.softplus(logit);
            let cz = g.mul(cv, logit)?;
            let bce = g.sub(sp, cz)?;
            let inner = g.add(bce, hinge)?;
            let weighted = g.scale(inner, config.lambda);
            let ad = g.abs(dv);
            let l1 = g.sum_cols(ad);
            let per = g.add(l1, weighted)?;
            let root = g.sum(per);
            let per_values = g.value(per).clone();
            if !g.value(root).item().is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let mut grads = g.backward(root)?;
            (per_values, grads.take(dv))
        };
        st.record(&per, step)?;
        st.update(g_delta, None, config.step_size);
        for (i, v) in st.s_traces.iter_mut().enumerate() {
            v.push(targets[i]);
        }
    }

    let x_cf = x0.add(&st.delta)?;
    let lp = flow.flow.log_prob(&x_cf, &targets)?;
    let logits = classifier.logits(&x_cf)?;
    let Batch {
        delta, traces, s_traces, ..
    } = st;
    Ok((0..n)
        .zip(traces.into_iter().zip(s_traces))
        .map(|(i, (loss_trace, s_trace))| {
            let c = instances[i].1;
            let delta_i = delta.row_slice(i).to_vec();
            let l1: f64 = delta_i.iter().map(|v| v.abs()).sum();
            let hinge = (flow.tau[c as usize] - lp[i]).max(0.0);
            let bce = crate::numerics::softplus(logits[i]) - targets[i] * logits[i];
            CounterfactualResult {
                x0: instances[i].0.clone(),
                x_cf: x_cf.row_slice(i).to_vec(),
                delta: delta_i,
                s_star: targets[i],
                target_class: c,
                gamma: None,
                alpha: config.lambda,
                loss_trace,
                s_trace,
                final_loss: l1 + config.lambda * (bce + hinge),
                hinge_active: hinge > 0.0,
            }
        })
        .collect())
}

pub fn generate_baseline(
    flow: &ClassConditionalFlow,
    classifier: &Classifier,
    x0: &[f64],
    target_class: u8,
    config: &BaselineConfig,
) -> Result<CounterfactualResult> {
    let mut out = generate_baseline_batch(flow, classifier, &[(x0.to_vec(), target_class)], config)?;
    Ok(out.remove(0))
}

pub fn generate_baseline_many(
    flow: &ClassConditionalFlow,
    classifier: &Classifier,
    instances: &[(Vec<f64>, u8)],
    config: &BaselineConfig,
) -> Result<Vec<CounterfactualResult>> {
    let chunks: Vec<Vec<CounterfactualResult>> = instances
        .par_chunks(BATCH_CHUNK)
        .map(|c| generate_baseline_batch(flow, classifier, c, config))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::flow::FlowConfig;

    /// One-dimensional flow with `mu(s) = m0 + m1 * s` and
    /// `log sigma(s) = c tanh((l0 + l1 * s) / c)`, tau fixed.
    fn gaussian_flow(m0: f64, m1: f64, l0: f64, l1: f64, tau: f64) -> ConditionalFlow {
        let cfg = FlowConfig {
            n_layers: 1,
            hidden: 4,
            ..FlowConfig::default()
        };
        let mut flow = ConditionalFlow::new(1, &cfg).unwrap();
        let l = &mut flow.layers[0];
        l.b_mu.data_mut()[0] = m0;
        l.u_mu.data_mut()[0] = m1;
        l.b_scale.data_mut()[0] = l0;
        l.u_scale.data_mut()[0] = l1;
        flow.set_tau(tau);
        flow
    }

    fn objective(flow: &ConditionalFlow, x0: f64, alpha: f64, deltas: &[f64], s: &[f64]) -> Vec<f64> {
        let x = Tensor::column(&deltas.iter().map(|d| x0 + d).collect::<Vec<_>>());
        let tau = flow.tau().unwrap();
        let lp = flow.log_prob(&x, s).unwrap();
        deltas
            .iter()
            .zip(lp)
            .map(|(d, l)| d.abs() + alpha * (tau - l).max(0.0))
            .collect()
    }

    /// Minimum of the objective over a `delta x s` grid on the feasible box.
    fn grid_optimum(flow: &ConditionalFlow, x0: f64, cfg: &CroceConfig, target: u8) -> f64 {
        let (lo, hi) = cfg.s_bounds(target);
        let deltas: Vec<f64> = (0..=4000).map(|i| -4.0 + 0.002 * i as f64).collect();
        let mut best = f64::INFINITY;
        for k in 0..=100 {
            let s = lo + (hi - lo) * k as f64 / 100.0;
            let v = objective(flow, x0, cfg.alpha, &deltas, &vec![s; deltas.len()]);
            best = v.into_iter().fold(best, f64::min);
        }
        best
    }

    #[test]
    fn matches_grid_optimum_in_one_dimension() {
        // Mean moves with s, so both the perturbation and the consensus level matter.
        let problems = [
            (0.0, 1.0, -0.5, 0.0, -1.5, -1.0, 1, 0.7, 5.0),
            (0.5, -1.0, -0.3, 0.2, -1.2, 2.0, 0, 0.8, 5.0),
            (0.2, 0.6, -0.8, 0.4, -0.8, -0.9, 1, 0.6, 2.0),
        ];
        for (m0, m1, l0, l1, tau, x0, target, gamma, alpha) in problems {
            let flow = gaussian_flow(m0, m1, l0, l1, tau);
            let cfg = CroceConfig {
                gamma,
                alpha,
                ..CroceConfig::default()
            };
            let r = generate_croce(&flow, &[x0], target, &cfg).unwrap();
            let best = grid_optimum(&flow, x0, &cfg, target);
            let got = objective(&flow, x0, alpha, &r.delta, &[r.s_star])[0];
            assert!((got - best).abs() <= 0.02 * best, "objective {got} vs grid {best}");
            let (lo, hi) = cfg.s_bounds(target);
            assert!(r.s_trace.iter().all(|s| (lo..=hi).contains(s)));
            assert_eq!(r.loss_trace.len(), cfg.steps);
        }
    }

    #[test]
    fn plain_descent_does_not_end_above_its_start() {
        let flow = gaussian_flow(0.2, 0.6, -0.8, 0.4, -0.8);
        for (x0, target) in [(-0.9, 1), (1.5, 0), (0.3, 1)] {
            let cfg = CroceConfig {
                optimizer: StepRule::PlainGd,
                ..CroceConfig::default()
            };
            let r = generate_croce(&flow, &[x0], target, &cfg).unwrap();
            assert!(r.final_loss <= r.loss_trace[0]);
        }
    }

    #[test]
    fn zero_alpha_keeps_the_input() {
        let flow = gaussian_flow(0.0, 1.0, 0.0, 0.0, -1.0);
        let cfg = CroceConfig {
            alpha: 0.0,
            steps: 50,
            ..CroceConfig::default()
        };
        let r = generate_croce(&flow, &[-3.0], 1, &cfg).unwrap();
        assert_eq!(r.delta, vec![0.0]);
        assert_eq!(r.s_star, cfg.gamma);
    }

    #[test]
    fn unit_gamma_pins_the_consensus_level() {
        let flow = gaussian_flow(0.0, 1.0, 0.0, 0.0, -1.0);
        let cfg = CroceConfig {
            gamma: 1.0,
            steps: 200,
            ..CroceConfig::default()
        };
        let up = generate_croce(&flow, &[-2.0], 1, &cfg).unwrap();
        let down = generate_croce(&flow, &[2.0], 0, &cfg).unwrap();
        assert!(up.s_trace.iter().all(|&s| s == 1.0));
        assert!(down.s_trace.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn plausible_input_is_already_optimal() {
        let flow = gaussian_flow(0.0, 0.0, 0.0, 0.0, -3.0);
        let r = generate_croce(&flow, &[0.1], 1, &CroceConfig::default()).unwrap();
        assert_eq!(r.delta, vec![0.0]);
        assert!(!r.hinge_active);
        assert_eq!(r.final_loss, 0.0);
    }

    #[test]
    fn higher_gamma_never_lowers_the_objective() {
        // The feasible s-interval shrinks as gamma grows.
        let flow = gaussian_flow(0.0, -1.5, -0.5, 0.0, -1.0, );
        let x0 = -2.0;
        let mut last = 0.0;
        for gamma in [0.55, 0.7, 0.85, 1.0] {
            let cfg = CroceConfig {
                gamma,
                ..CroceConfig::default()
            };
            let best = grid_optimum(&flow, x0, &cfg, 1);
            assert!(best >= last - 1e-12);
            last = best;
        }
    }

    #[test]
    fn batches_match_single_instances_and_are_deterministic() {
        let flow = gaussian_flow(0.2, 0.5, -0.4, 0.3, -1.2);
        let instances: Vec<(Vec<f64>, u8)> = (0..70)
            .map(|i| (vec![-2.0 + 0.06 * i as f64], (i % 2) as u8))
            .collect();
        let cfg = CroceConfig {
            steps: 100,
            optimizer: StepRule::Adam,
            ..CroceConfig::default()
        };
        let many = generate_croce_many(&flow, &instances, &cfg).unwrap();
        assert_eq!(many, generate_croce_many(&flow, &instances, &cfg).unwrap());
        for i in [0, 33, 69] {
            let one = generate_croce(&flow, &instances[i].0, instances[i].1, &cfg).unwrap();
            assert_eq!(one, many[i]);
        }
    }

    #[test]
    fn rejects_invalid_settings() {
        let flow = gaussian_flow(0.0, 0.0, 0.0, 0.0, -1.0);
        for cfg in [
            CroceConfig { gamma: 0.0, ..CroceConfig::default() },
            CroceConfig { gamma: 1.2, ..CroceConfig::default() },
            CroceConfig { steps: 0, ..CroceConfig::default() },
            CroceConfig { alpha: -1.0, ..CroceConfig::default() },
        ] {
            assert!(generate_croce(&flow, &[0.0], 1, &cfg).is_err());
        }
        assert!(generate_croce(&flow, &[0.0, 1.0], 1, &CroceConfig::default()).is_err());
        let mut untrained = flow.clone();
        untrained.tau = None;
        assert!(matches!(
            generate_croce(&untrained, &[0.0], 1, &CroceConfig::default()),
            Err(Error::MissingTau)
        ));
    }

    fn logistic(w: f64, b: f64) -> Classifier {
        let mut c = Classifier::init(&ClassifierConfig::logistic(), 1).unwrap();
        c.layers[0].w.data_mut()[0] = w;
        c.layers[0].b.data_mut()[0] = b;
        c
    }

    #[test]
    fn baseline_crosses_the_boundary() {
        let class_flow = ClassConditionalFlow {
            flow: gaussian_flow(0.0, 0.0, 0.0, 0.0, -10.0),
            tau: [-10.0, -10.0],
        };
        let clf = logistic(4.0, -2.0);
        // The optimum is where 4 lambda (1 - p) = 1, so p = 0.95 at lambda = 5.
        let cfg = BaselineConfig {
            lambda: 5.0,
            ..BaselineConfig::default()
        };
        let r = generate_baseline(&class_flow, &clf, &[0.2], 1, &cfg).unwrap();
        let p = clf.predict_proba(&Tensor::row(&r.x_cf)).unwrap()[0];
        assert!((p - 0.95).abs() < 0.01, "p = {p}");
        assert_eq!(clf.predict(&Tensor::row(&r.x_cf)).unwrap(), vec![1]);
        assert_eq!(r.gamma, None);
        assert_eq!(r.s_star, 1.0);
        // With lambda = 0 only the L1 term remains.
        let idle = BaselineConfig {
            lambda: 0.0,
            steps: 20,
            ..BaselineConfig::default()
        };
        let r = generate_baseline(&class_flow, &clf, &[0.2], 1, &idle).unwrap();
        assert_eq!(r.x_cf, vec![0.2]);
    }

    #[test]
    fn targets_are_the_opposite_class() {
        let clf = logistic(4.0, -2.0);
        let x = Tensor::column(&[0.0, 1.0]);
        let t = select_explanation_targets(&clf, &x).unwrap();
        assert_eq!(t, vec![(vec![0.0], 1), (vec![1.0], 0)]);
    }
}
