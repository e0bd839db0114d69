use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[&[usize]]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(shapes)),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            Optimizer::Adam(adam) => adam.step(params, grads, lr),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0; s.iter().product()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = Tensor::row(&[3.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[x.shape()]);
        for _ in 0..2000 {
            let g = x.map(|v| 2.0 * v);
            opt.step(&mut [&mut x], &[&g], 0.05);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "{:?}", x.data());
    }

    #[test]
    fn zero_gradient_leaves_adam_params_fixed() {
        let mut x = Tensor::row(&[1.5]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &[x.shape()]);
        let g = Tensor::row(&[0.0]);
        for _ in 0..10 {
            opt.step(&mut [&mut x], &[&g], 0.1);
        }
        assert_eq!(x.data(), &[1.5]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
