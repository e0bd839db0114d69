//! Binary classifiers: a ReLU MLP and logistic regression, both trained on
//! mean binary cross-entropy with mini-batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Optimizer, OptimizerKind, Tensor, Var};
use crate::seed;

/// Probabilities are kept this far away from 0 and 1 so that downstream logs
/// and ratios stay finite even when a logit saturates the sigmoid.
pub const PROB_EPS: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub arch: Architecture,
    /// Ignored for logistic regression.
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Mlp,
            hidden_sizes: vec![64, 64],
            epochs: 100,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn logistic() -> Self {
        Self {
            arch: Architecture::Logistic,
            hidden_sizes: Vec::new(),
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("classifier epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("classifier batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("classifier learning_rate must be > 0"));
        }
        if self.arch == Architecture::Mlp && self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be >= 1"));
        }
        Ok(())
    }

    fn layer_sizes(&self, input: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        if self.arch == Architecture::Mlp {
            sizes.extend(&self.hidden_sizes);
        }
        sizes.push(1);
        sizes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub w: Tensor,
    /// `1 x out`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub layers: Vec<Dense>,
    pub train_accuracy: Option<f64>,
}

const FORMAT: &str = "robcf-classifier";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    format: String,
    version: u32,
    classifier: Classifier,
}

impl Classifier {
    /// Fresh parameters with PyTorch-style `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` init.
    pub fn init(config: &ClassifierConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("classifier input dimension must be >= 1"));
        }
        let mut rng = seed::rng(seed::derive(config.seed, "classifier-init", 0));
        let sizes = config.layer_sizes(input_dim);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weights = (0..w[0] * w[1]).map(|_| u.sample(&mut rng)).collect();
                let bias = (0..w[1]).map(|_| u.sample(&mut rng)).collect();
                Dense {
                    w: Tensor::matrix(w[0], w[1], weights).expect("sized above"),
                    b: Tensor::matrix(1, w[1], bias).expect("sized above"),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
            train_accuracy: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    fn check_dim(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                left: x.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Class-1 logit for each row of `x`.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.w)?.add(&layer.b)?;
            if i < last {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let logits = h.into_data();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("classifier produced a non-finite logit"));
        }
        Ok(logits)
    }

    /// `p(y = 1 | x)` for each row, strictly inside `(0, 1)`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self
            .logits(x)?
            .into_iter()
            .map(|z| sigmoid(z).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect())
    }

    /// Hard labels; probability exactly 0.5 maps to class 1.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>> {
        Ok(self
            .predict_proba(x)?
            .into_iter()
            .map(|p| u8::from(p >= 0.5))
            .collect())
    }

    /// Differentiable class-1 logit (`n x 1`) for a graph input `x`.
    pub fn logit_node<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.constant_ref(&layer.w);
            let b = g.constant_ref(&layer.b);
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn accuracy(&self, x: &Tensor, y: &[u8]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(y).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / y.len().max(1) as f64)
    }

    /// Trains from the config's seed. Deterministic given `(config, x, y)`.
    pub fn train(config: &ClassifierConfig, x: &Tensor, y: &[u8]) -> Result<Self> {
        config.validate()?;
        if x.rows() != y.len() || y.is_empty() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        let ones = y.iter().filter(|&&v| v == 1).count();
        if ones == 0 || ones == y.len() {
            return Err(Error::SingleClass);
        }
        let mut model = Self::init(config, x.cols())?;
        let shapes: Vec<&[usize]> = model
            .layers
            .iter()
            .flat_map(|l| [l.w.shape(), l.b.shape()])
            .collect();
        let mut opt = Optimizer::new(config.optimizer, &shapes);
        let mut rng = seed::rng(seed::derive(config.seed, "classifier-batches", 0));
        let mut order: Vec<usize> = (0..y.len()).collect();
        let targets: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();

        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let xb = x.select_rows(batch);
                let yb = Tensor::column(&batch.iter().map(|&i| targets[i]).collect::<Vec<_>>());
                let grads = model.batch_gradients(xb, yb)?;
                let wd = config.weight_decay;
                let grads: Vec<Tensor> = grads
                    .into_iter()
                    .enumerate()
                    .map(|(k, mut g)| {
                        // Weight decay on weights only (even slots), not biases.
                        if wd > 0.0 && k % 2 == 0 {
                            let layer = &model.layers[k / 2];
                            for (gv, wv) in g.data_mut().iter_mut().zip(layer.w.data()) {
                                *gv += wd * wv;
                            }
                        }
                        g
                    })
                    .collect();
                let mut params: Vec<&mut Tensor> = model
                    .layers
                    .iter_mut()
                    .flat_map(|l| [&mut l.w, &mut l.b])
                    .collect();
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                opt.step(&mut params, &grad_refs, config.learning_rate);
            }
        }
        model.train_accuracy = Some(model.accuracy(x, y)?);
        Ok(model)
    }

    /// Gradients of mean BCE for one batch, in `[w0, b0, w1, b1, ...]` order.
    fn batch_gradients(&self, xb: Tensor, yb: Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        let mut h = g.constant(xb);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param_ref(&layer.w);
            let b = g.param_ref(&layer.b);
            vars.push(w);
            vars.push(b);
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        // BCE with logits: softplus(z) - y z
        let y = g.constant(yb);
        let sp = g.softplus(h);
        let yz = g.mul(y, h)?;
        let per = g.sub(sp, yz)?;
        let loss = g.mean(per);
        if !g.value(loss).item().is_finite() {
            return Err(Error::invalid("classifier loss became non-finite"));
        }
        let mut grads = g.backward(loss)?;
        Ok(vars
            .into_iter()
            .map(|v| grads.take(v).expect("parameter gradient"))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ClassifierFile {
            format: FORMAT.to_string(),
            version: VERSION,
            classifier: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ClassifierFile = serde_json::from_str(s)?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported classifier file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file.classifier)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
