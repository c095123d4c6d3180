//! Small dense-network building blocks shared by the image and sequence models.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer `y = W x + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense { w: Array2::zeros((fan_out, fan_in)), b: Array1::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w.dot(&x) + &self.b
    }

    /// Accumulates parameter gradients for upstream `dy` at input `x`; returns `dL/dx`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Dense) -> Array1<f64> {
        for (r, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                grad.w.row_mut(r).scaled_add(g, &x);
            }
        }
        grad.b += &dy;
        self.w.t().dot(&dy)
    }
}

/// A set of parameter tensors visited in a fixed order.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

impl ParamSet for Dense {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().expect("standard layout"), self.b.as_slice().expect("standard layout")]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = logits.mapv(|z| (z - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// `log Σ exp(z)`, shifted by the max.
pub fn log_sum_exp(logits: ArrayView1<f64>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy against a one-hot target, and its gradient w.r.t. the logits.
pub fn cross_entropy_grad(logits: ArrayView1<f64>, label: usize) -> (f64, Array1<f64>) {
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// AdaGrad: `G += g²`, `θ -= lr · g / (√G + ε)`, per coordinate.
#[derive(Debug, Clone)]
pub struct Adagrad {
    pub learning_rate: f64,
    pub epsilon: f64,
    accum: Vec<Vec<f64>>,
}

impl Adagrad {
    pub fn new<P: ParamSet>(params: &P, learning_rate: f64, epsilon: f64) -> Self {
        let accum = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Adagrad { learning_rate, epsilon, accum }
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accum
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for ((p, g), acc) in params.slices_mut().into_iter().zip(grads.slices()).zip(&mut self.accum) {
            for ((p, &g), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *a += g * g;
                let denom = a.sqrt() + eps;
                if denom > 0.0 {
                    *p -= lr * g / denom;
                }
            }
        }
    }
}
