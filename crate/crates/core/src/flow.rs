//! Conditional masked autoregressive flow `p(x | s)`.
//!
//! Each layer is a MADE conditioner producing a shift `mu_j` and a log-scale
//! `log sigma_j` for coordinate `j` from the coordinates that precede it in the
//! layer's ordering, plus the scalar context `s`, which enters every hidden
//! layer and the output. The density direction is
//!
//! ```text
//! u_j = (x_j - mu_j(x_<j, s)) * exp(-log sigma_j(x_<j, s))
//! ```
//!
//! so the Jacobian of each layer is triangular and
//! `log p(x | s) = log N(z; 0, I) - sum_layers sum_j log sigma_j`.
//! Consecutive layers use reversed orderings. The raw log-scale output `a` is
//! squashed into `(lo, hi)` by
//!
//! ```text
//! log sigma = lo + (hi - lo) * sigmoid(k * a + b0),  b0 = ln(-lo / hi),  k = (hi - lo) / (-lo * hi)
//! ```
//!
//! which maps `a = 0` to 0 with unit slope; for `lo = -c, hi = c` it is
//! `c * tanh(a / c)`. Requires `lo < 0 < hi`.
//!
//! Masked weight entries are stored as exact zeros and re-zeroed after every
//! optimizer step, which makes the autoregressive structure exact in floating
//! point.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, sigmoid, Graph, Optimizer, OptimizerKind, Tensor, Var};
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden: usize,
    /// Bounds on each layer's per-coordinate `log sigma`.
    pub log_scale_min: f64,
    pub log_scale_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    pub weight_decay: f64,
    /// Fraction of the rows held out for early stopping.
    pub validation_fraction: f64,
    pub patience: usize,
    /// Stdev of Gaussian noise added to training inputs each batch (0 = off).
    pub dequantization_noise: f64,
    /// Stdev of Gaussian noise added to the training context each batch,
    /// clamped to `[0, 1]` (0 = off). Smooths `p(x | s)` along `s` when the
    /// training contexts cluster at 0 and 1.
    pub context_noise: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_layers: 5,
            hidden: 64,
            log_scale_min: -2.0,
            log_scale_max: 2.0,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            cosine_decay: true,
            weight_decay: 0.0,
            validation_fraction: 0.1,
            patience: 20,
            dequantization_noise: 0.0,
            context_noise: 0.0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 {
            return Err(Error::invalid("flow needs at least one layer and one hidden unit"));
        }
        if !(self.log_scale_min < 0.0 && self.log_scale_max > 0.0) || !self.log_scale_min.is_finite() || !self.log_scale_max.is_finite() {
            return Err(Error::invalid("log-scale bounds must satisfy min < 0 < max"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("flow epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("flow learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        if !(self.dequantization_noise >= 0.0 && self.context_noise >= 0.0) {
            return Err(Error::invalid("noise levels must be >= 0"));
        }
        Ok(())
    }
}

/// One MADE conditioner with its affine transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MadeLayer {
    /// `degrees[j]` is coordinate `j`'s 1-based position in this layer's ordering.
    pub degrees: Vec<usize>,
    pub hidden_degrees: Vec<usize>,
    pub log_scale_min: f64,
    pub log_scale_max: f64,
    pub w1: Tensor,
    pub u1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub u2: Tensor,
    pub b2: Tensor,
    pub w_mu: Tensor,
    pub u_mu: Tensor,
    pub b_mu: Tensor,
    pub w_scale: Tensor,
    pub u_scale: Tensor,
    pub b_scale: Tensor,
    pub mask1: Tensor,
    pub mask2: Tensor,
    pub mask_out: Tensor,
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut seed::Rng) -> Tensor {
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| u.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn mask_tensor(rows: usize, cols: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| if keep(i / cols, i % cols) { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn apply_mask(w: &mut Tensor, m: &Tensor) {
    for (v, k) in w.data_mut().iter_mut().zip(m.data()) {
        *v *= k;
    }
}

/// `a + s ⊗ u + b` for an `n x m` block `a`, context column `s` and rows `u`, `b`.
fn add_context(a: &mut Tensor, s: &[f64], u: &Tensor, b: &Tensor) {
    let m = a.cols();
    let (u, b) = (u.data(), b.data());
    for (i, row) in a.data_mut().chunks_mut(m).enumerate() {
        for ((v, uj), bj) in row.iter_mut().zip(u).zip(b) {
            *v += s[i] * uj + bj;
        }
    }
}

impl MadeLayer {
    /// Conditioner for the given coordinate ordering, initialized to the
    /// identity transform (zero output weights).
    pub fn new(degrees: Vec<usize>, hidden: usize, log_scale: (f64, f64), rng: &mut seed::Rng) -> Self {
        let d = degrees.len();
        let hidden_degrees: Vec<usize> = (0..hidden)
            .map(|k| if d > 1 { k % (d - 1) + 1 } else { 0 })
            .collect();
        let mask1 = mask_tensor(d, hidden, |j, k| hidden_degrees[k] >= degrees[j]);
        let mask2 = mask_tensor(hidden, hidden, |l, k| hidden_degrees[k] >= hidden_degrees[l]);
        let mask_out = mask_tensor(hidden, d, |k, j| degrees[j] > hidden_degrees[k]);

        let b_in = 1.0 / ((d + 1) as f64).sqrt();
        let b_h = 1.0 / ((hidden + 1) as f64).sqrt();
        let mut w1 = uniform_tensor(d, hidden, b_in, rng);
        apply_mask(&mut w1, &mask1);
        let u1 = uniform_tensor(1, hidden, b_in, rng);
        let b1 = uniform_tensor(1, hidden, b_in, rng);
        let mut w2 = uniform_tensor(hidden, hidden, b_h, rng);
        apply_mask(&mut w2, &mask2);
        let u2 = uniform_tensor(1, hidden, b_h, rng);
        let b2 = uniform_tensor(1, hidden, b_h, rng);
        Self {
            degrees,
            hidden_degrees,
            log_scale_min: log_scale.0,
            log_scale_max: log_scale.1,
            w1,
            u1,
            b1,
            w2,
            u2,
            b2,
            w_mu: Tensor::zeros(&[hidden, d]),
            u_mu: Tensor::zeros(&[1, d]),
            b_mu: Tensor::zeros(&[1, d]),
            w_scale: Tensor::zeros(&[hidden, d]),
            u_scale: Tensor::zeros(&[1, d]),
            b_scale: Tensor::zeros(&[1, d]),
            mask1,
            mask2,
            mask_out,
        }
    }

    pub fn dim(&self) -> usize {
        self.degrees.len()
    }

    /// `(lo, hi - lo, k, b0)` of the log-scale squashing.
    fn squash_coefficients(&self) -> (f64, f64, f64, f64) {
        let (lo, hi) = (self.log_scale_min, self.log_scale_max);
        (lo, hi - lo, (hi - lo) / (-lo * hi), (-lo / hi).ln())
    }

    fn params(&self) -> [&Tensor; 12] {
        [
            &self.w1,
            &self.u1,
            &self.b1,
            &self.w2,
            &self.u2,
            &self.b2,
            &self.w_mu,
            &self.u_mu,
            &self.b_mu,
            &self.w_scale,
            &self.u_scale,
            &self.b_scale,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w1,
            &mut self.u1,
            &mut self.b1,
            &mut self.w2,
            &mut self.u2,
            &mut self.b2,
            &mut self.w_mu,
            &mut self.u_mu,
            &mut self.b_mu,
            &mut self.w_scale,
            &mut self.u_scale,
            &mut self.b_scale,
        ]
    }

    fn reapply_masks(&mut self) {
        apply_mask(&mut self.w1, &self.mask1);
        apply_mask(&mut self.w2, &self.mask2);
        apply_mask(&mut self.w_mu, &self.mask_out);
        apply_mask(&mut self.w_scale, &self.mask_out);
    }

    /// `(mu, log sigma)` for each row, computed with plain tensor arithmetic.
    pub fn conditioner(&self, x: &Tensor, s: &[f64]) -> Result<(Tensor, Tensor)> {
        let mut h1 = x.matmul(&self.w1)?;
        add_context(&mut h1, s, &self.u1, &self.b1);
        h1.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = h1.matmul(&self.w2)?;
        add_context(&mut h2, s, &self.u2, &self.b2);
        h2.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut mu = h2.matmul(&self.w_mu)?;
        add_context(&mut mu, s, &self.u_mu, &self.b_mu);
        let mut ls = h2.matmul(&self.w_scale)?;
        add_context(&mut ls, s, &self.u_scale, &self.b_scale);
        let (lo, span, k, b0) = self.squash_coefficients();
        ls.data_mut().iter_mut().for_each(|v| *v = lo + span * sigmoid(k * *v + b0));
        Ok((mu, ls))
    }

    /// Density direction `x -> u`; also returns `log sigma` per entry.
    pub fn inverse(&self, x: &Tensor, s: &[f64]) -> Result<(Tensor, Tensor)> {
        let (mu, ls) = self.conditioner(x, s)?;
        let data = x
            .data()
            .iter()
            .zip(mu.data().iter().zip(ls.data()))
            .map(|(&xv, (&m, &l))| (xv - m) * (-l).exp())
            .collect();
        Ok((Tensor::new(x.shape().to_vec(), data)?, ls))
    }

    /// Generation direction `u -> x`, one pass per position in the ordering.
    pub fn forward(&self, u: &Tensor, s: &[f64]) -> Result<Tensor> {
        let d = self.dim();
        let mut x = Tensor::zeros(u.shape());
        let mut by_position: Vec<usize> = (0..d).collect();
        by_position.sort_by_key(|&j| self.degrees[j]);
        for &j in &by_position {
            let (mu, ls) = self.conditioner(&x, s)?;
            for i in 0..u.rows() {
                let k = i * d + j;
                x.data_mut()[k] = u.data()[k] * ls.data()[k].exp() + mu.data()[k];
            }
        }
        Ok(x)
    }

    /// Differentiable density-direction step; returns `(u, log sigma)`.
    pub fn inverse_node<'a>(&'a self, g: &mut Graph<'a>, x: Var, s: Var) -> Result<(Var, Var)> {
        let dense = |g: &mut Graph<'a>, h: Var, w: &'a Tensor, u: &'a Tensor, b: &'a Tensor| -> Result<Var> {
            let w = g.constant_ref(w);
            let u = g.constant_ref(u);
            let b = g.constant_ref(b);
            let hw = g.matmul(h, w)?;
            let su = g.matmul(s, u)?;
            let z = g.add(hw, su)?;
            g.add(z, b)
        };
        self.inverse_node_with(g, x, dense)
    }

    fn inverse_node_with<'a, F>(&'a self, g: &mut Graph<'a>, x: Var, mut dense: F) -> Result<(Var, Var)>
    where
        F: FnMut(&mut Graph<'a>, Var, &'a Tensor, &'a Tensor, &'a Tensor) -> Result<Var>,
    {
        let z1 = dense(g, x, &self.w1, &self.u1, &self.b1)?;
        let h1 = g.relu(z1);
        let z2 = dense(g, h1, &self.w2, &self.u2, &self.b2)?;
        let h2 = g.relu(z2);
        let mu = dense(g, h2, &self.w_mu, &self.u_mu, &self.b_mu)?;
        let a = dense(g, h2, &self.w_scale, &self.u_scale, &self.b_scale)?;
        let (lo, span, k, b0) = self.squash_coefficients();
        let a = g.scale(a, k);
        let a = g.offset(a, b0);
        let t = g.sigmoid(a);
        let t = g.scale(t, span);
        let ls = g.offset(t, lo);
        let centered = g.sub(x, mu)?;
        let neg = g.scale(ls, -1.0);
        let inv_sigma = g.exp(neg);
        let u = g.mul(centered, inv_sigma)?;
        Ok((u, ls))
    }
}

/// Stack of [`MadeLayer`]s over a standard normal base, with plausibility threshold `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFlow {
    pub dim: usize,
    pub layers: Vec<MadeLayer>,
    pub config: FlowConfig,
    pub tau: Option<f64>,
}

const FORMAT: &str = "robcf-flow";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FlowFile<T> {
    format: String,
    version: u32,
    flow: T,
}

fn validate_inputs(dim: usize, x: &Tensor, s: &[f64]) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::ShapeMismatch {
            op: "flow input",
            left: x.shape().to_vec(),
            right: vec![dim],
        });
    }
    if x.rows() != s.len() {
        return Err(Error::invalid(format!(
            "{} rows but {} context values",
            x.rows(),
            s.len()
        )));
    }
    if !x.all_finite() {
        return Err(Error::invalid("flow input contains non-finite values"));
    }
    if let Some(bad) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("context value {bad} is outside [0, 1]")));
    }
    Ok(())
}

/// Median with the two-middle average for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl ConditionalFlow {
    /// Identity-initialized flow: `log p(x | s)` is the standard normal density for every `s`.
    pub fn new(dim: usize, config: &FlowConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::invalid("flow dimension must be >= 1"));
        }
        let mut rng = seed::rng(seed::derive(config.seed, "flow-init", 0));
        let layers = (0..config.n_layers)
            .map(|l| {
                let degrees = if l % 2 == 0 {
                    (1..=dim).collect()
                } else {
                    (1..=dim).rev().collect()
                };
                MadeLayer::new(degrees, config.hidden, (config.log_scale_min, config.log_scale_max), &mut rng)
            })
            .collect();
        Ok(Self {
            dim,
            layers,
            config: config.clone(),
            tau: None,
        })
    }

    pub fn tau(&self) -> Result<f64> {
        self.tau.ok_or(Error::MissingTau)
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    /// Maps data to base space; returns `z` and the per-row sum of log-scales.
    pub fn inverse(&self, x: &Tensor, s: &[f64]) -> Result<(Tensor, Vec<f64>)> {
        validate_inputs(self.dim, x, s)?;
        let mut cur = x.clone();
        let mut log_scale = vec![0.0; x.rows()];
        for layer in &self.layers {
            let (u, ls) = layer.inverse(&cur, s)?;
            for (acc, row) in log_scale.iter_mut().zip(ls.data().chunks(self.dim)) {
                *acc += row.iter().sum::<f64>();
            }
            cur = u;
        }
        Ok((cur, log_scale))
    }

    /// Maps base samples to data space.
    pub fn forward(&self, z: &Tensor, s: &[f64]) -> Result<Tensor> {
        if z.cols() != self.dim || z.rows() != s.len() {
            return Err(Error::invalid("flow forward: shape does not match dimension/context"));
        }
        let mut cur = z.clone();
        for layer in self.layers.iter().rev() {
            cur = layer.forward(&cur, s)?;
        }
        Ok(cur)
    }

    /// `log p(x_i | s_i)` per row.
    pub fn log_prob(&self, x: &Tensor, s: &[f64]) -> Result<Vec<f64>> {
        let (z, log_scale) = self.inverse(x, s)?;
        Ok(z
            .data()
            .chunks(self.dim)
            .zip(log_scale)
            .map(|(row, ls)| base_log_density(row) - ls)
            .collect())
    }

    /// Differentiable `log p(x | s)` as an `n x 1` node; `x` is `n x d`, `s` is `n x 1`.
    pub fn log_prob_node<'a>(&'a self, g: &mut Graph<'a>, x: Var, s: Var) -> Result<Var> {
        let mut cur = x;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (u, ls) = layer.inverse_node(g, cur, s)?;
            let row = g.sum_cols(ls);
            total = Some(match total {
                None => row,
                Some(t) => g.add(t, row)?,
            });
            cur = u;
        }
        let z2 = g.square(cur);
        let sq = g.sum_cols(z2);
        let half = g.scale(sq, -0.5);
        let base = g.offset(half, -0.5 * self.dim as f64 * LN_2PI);
        let total = total.expect("at least one layer");
        g.sub(base, total)
    }

    /// `n` draws at context `s`.
    pub fn sample(&self, n: usize, s: f64, seed: u64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("context value {s} is outside [0, 1]")));
        }
        let mut rng = seed::rng(seed);
        let data = (0..n * self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Tensor::matrix(n, self.dim, data)?;
        self.forward(&z, &vec![s; n])
    }

    /// Median of `log p(x_i | s_i)` over the given rows.
    pub fn threshold_tau(&self, x: &Tensor, s: &[f64]) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::invalid("threshold_tau on zero rows"));
        }
        let lp = self.log_prob(x, s)?;
        median(&lp).ok_or_else(|| Error::invalid("empty log-likelihoods"))
    }

    fn all_params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Mean negative log-likelihood gradients for one batch, in `all_params` order.
    fn batch_gradients(&self, xb: Tensor, sb: Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(xb);
        let sv = g.constant(sb);
        let mut param_vars = Vec::new();
        let mut cur = xv;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (u, ls) = layer.inverse_node_with(&mut g, cur, |g, h, w, u, b| {
                let w = g.param_ref(w);
                let u = g.param_ref(u);
                let b = g.param_ref(b);
                param_vars.extend([w, u, b]);
                let hw = g.matmul(h, w)?;
                let su = g.matmul(sv, u)?;
                let z = g.add(hw, su)?;
                g.add(z, b)
            })?;
            let row = g.sum_cols(ls);
            total = Some(match total {
                None => row,
                Some(t) => g.add(t, row)?,
            });
            cur = u;
        }
        let z2 = g.square(cur);
        let sq = g.sum_cols(z2);
        let half = g.scale(sq, -0.5);
        let base = g.offset(half, -0.5 * self.dim as f64 * LN_2PI);
        let total = total.expect("at least one layer");
        let lp = g.sub(base, total)?;
        let mean = g.mean(lp);
        let loss = g.scale(mean, -1.0);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::invalid("flow training loss became non-finite"));
        }
        let mut grads = g.backward(loss)?;
        let grads = param_vars
            .into_iter()
            .map(|v| grads.take(v).expect("parameter gradient"))
            .collect();
        Ok((value, grads))
    }

    /// Maximum-likelihood training on `(x_i, s_i)` pairs; sets `tau` to the
    /// median training log-likelihood afterwards.
    pub fn fit(x: &Tensor, s: &[f64], config: &FlowConfig) -> Result<Self> {
        config.validate()?;
        validate_inputs(x.cols(), x, s)?;
        if x.rows() < 2 * config.batch_size {
            return Err(Error::invalid(format!(
                "flow training needs at least {} rows (2 x batch_size), got {}",
                2 * config.batch_size,
                x.rows()
            )));
        }
        let mut flow = Self::new(x.cols(), config)?;
        let mut rng = seed::rng(seed::derive(config.seed, "flow-train", 0));

        let mut rows: Vec<usize> = (0..x.rows()).collect();
        rows.shuffle(&mut rng);
        let n_holdout = ((x.rows() as f64) * config.validation_fraction).round() as usize;
        let holdout = rows.split_off(rows.len() - n_holdout);
        let mut train_rows = rows;
        train_rows.sort_unstable();
        let hold_x = x.select_rows(&holdout);
        let hold_s: Vec<f64> = holdout.iter().map(|&i| s[i]).collect();

        let shapes: Vec<Vec<usize>> = flow.all_params().iter().map(|t| t.shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &shape_refs);
        let noise = config.dequantization_noise;

        let mut best: Option<(f64, Vec<MadeLayer>)> = None;
        let mut since_best = 0usize;
        for epoch in 0..config.epochs {
            let lr = if config.cosine_decay {
                cosine_lr(config.learning_rate, epoch, config.epochs)
            } else {
                config.learning_rate
            };
            train_rows.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for batch in train_rows.chunks(config.batch_size) {
                let mut xb = x.select_rows(batch);
                if noise > 0.0 {
                    for v in xb.data_mut() {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *v += noise * e;
                    }
                }
                let mut sb = Tensor::column(&batch.iter().map(|&i| s[i]).collect::<Vec<_>>());
                if config.context_noise > 0.0 {
                    for v in sb.data_mut() {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *v = (*v + config.context_noise * e).clamp(0.0, 1.0);
                    }
                }
                let (loss, mut grads) = flow.batch_gradients(xb, sb)?;
                epoch_loss += loss;
                batches += 1;
                if config.weight_decay > 0.0 {
                    for (g, p) in grads.iter_mut().zip(flow.all_params()) {
                        for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                            *gv += config.weight_decay * pv;
                        }
                    }
                }
                let mut params: Vec<&mut Tensor> =
                    flow.layers.iter_mut().flat_map(|l| l.params_mut()).collect();
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                opt.step(&mut params, &grad_refs, lr);
                flow.layers.iter_mut().for_each(MadeLayer::reapply_masks);
            }

            if holdout.is_empty() {
                continue;
            }
            let hold = flow.log_prob(&hold_x, &hold_s)?;
            let hold_mean = hold.iter().sum::<f64>() / hold.len() as f64;
            debug!(epoch, train_nll = epoch_loss / batches as f64, holdout_ll = hold_mean, "flow epoch");
            if !hold_mean.is_finite() {
                return Err(Error::invalid(format!("flow holdout likelihood non-finite at epoch {epoch}")));
            }
            match &best {
                Some((b, _)) if hold_mean <= *b => {
                    since_best += 1;
                    if since_best >= config.patience {
                        break;
                    }
                }
                _ => {
                    best = Some((hold_mean, flow.layers.clone()));
                    since_best = 0;
                }
            }
        }
        if let Some((_, layers)) = best {
            flow.layers = layers;
        }
        let tau = flow.threshold_tau(x, s)?;
        flow.tau = Some(tau);
        Ok(flow)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FlowFile {
            format: FORMAT.to_string(),
            version: VERSION,
            flow: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: FlowFile<Self> = serde_json::from_str(s)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported flow file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn base_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

/// A flow conditioned on the class label (`s` in `{0, 1}`) with one
/// plausibility threshold per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConditionalFlow {
    pub flow: ConditionalFlow,
    pub tau: [f64; 2],
}

impl ClassConditionalFlow {
    pub fn fit(x: &Tensor, y: &[u8], config: &FlowConfig) -> Result<Self> {
        let s: Vec<f64> = y.iter().map(|&c| f64::from(c)).collect();
        let flow = ConditionalFlow::fit(x, &s, config)?;
        let lp = flow.log_prob(x, &s)?;
        let tau_of = |c: u8| {
            let v: Vec<f64> = lp.iter().zip(y).filter(|(_, &l)| l == c).map(|(v, _)| *v).collect();
            median(&v).ok_or_else(|| Error::invalid(format!("no training rows of class {c}")))
        };
        Ok(Self {
            tau: [tau_of(0)?, tau_of(1)?],
            flow,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FlowFile {
            format: format!("{FORMAT}-class"),
            version: VERSION,
            flow: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: FlowFile<Self> = serde_json::from_str(s)?;
        if file.format != format!("{FORMAT}-class") || file.version != VERSION {
            return Err(Error::invalid("unsupported class-conditional flow file"));
        }
        Ok(file.flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
