use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_trainable, softmax, Classifier, ConfidenceVector, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Separates the batch-shuffle stream from the init stream under one seed.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
            })
            .collect()
    }
}

/// Feed-forward ReLU network with a softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Gradient of the mean cross-entropy, shaped like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl MlpGradient {
    /// Same ordering as [`Mlp::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl Mlp {
    /// He-initialized network with layer widths `dims = [d, h1, .., C]`.
    pub fn init(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / inputs.max(1) as f64).sqrt()).expect("finite std");
                Layer {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Self { layers }
    }

    /// Mini-batch SGD on mean cross-entropy.
    pub fn train(train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        check_trainable(train)?;
        let mut dims = vec![train.dim()];
        dims.extend(&cfg.hidden);
        dims.push(train.num_classes());
        let mut model = Self::init(&dims, cfg.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let xs: Vec<&[f64]> = batch.iter().map(|&i| train.feature(i)).collect();
                let ys: Vec<usize> = batch.iter().map(|&i| train.label(i)).collect();
                let (loss, grad) = model.loss_and_gradient_refs(&xs, &ys);
                epoch_loss += loss * batch.len() as f64;
                model.step(&grad, cfg.learning_rate);
            }
            if !epoch_loss.is_finite() || model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        Ok(model)
    }

    fn step(&mut self, grad: &MlpGradient, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grad.weights.iter().zip(&grad.bias)) {
            for (w, g) in layer.weights.iter_mut().zip(gw) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(gb) {
                *b -= lr * g;
            }
        }
    }

    /// Pre-activations of every layer for one input.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&act);
            if l + 1 < self.layers.len() {
                act = z.iter().map(|v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    /// Mean cross-entropy over `(xs, ys)` and its gradient by backprop.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[usize]) -> (f64, MlpGradient) {
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        self.loss_and_gradient_refs(&refs, ys)
    }

    fn loss_and_gradient_refs(&self, xs: &[&[f64]], ys: &[usize]) -> (f64, MlpGradient) {
        let mut grad = MlpGradient {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        };
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        for (x, &y) in xs.iter().zip(ys) {
            let pre = self.forward_trace(x);
            let probs = softmax(&pre[last]);
            loss -= probs[y].max(f64::MIN_POSITIVE).ln();
            let mut delta: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(k, p)| p - if k == y { 1.0 } else { 0.0 })
                .collect();
            for l in (0..=last).rev() {
                let layer = &self.layers[l];
                let input: Vec<f64> = if l == 0 {
                    x.to_vec()
                } else {
                    pre[l - 1].iter().map(|v| v.max(0.0)).collect()
                };
                for (o, d) in delta.iter().enumerate() {
                    grad.bias[l][o] += d;
                    let row = &mut grad.weights[l][o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, a) in row.iter_mut().zip(&input) {
                        *g += d * a;
                    }
                }
                if l > 0 {
                    delta = (0..layer.inputs)
                        .map(|i| {
                            if pre[l - 1][i] <= 0.0 {
                                return 0.0;
                            }
                            (0..layer.outputs)
                                .map(|o| layer.weights[o * layer.inputs + i] * delta[o])
                                .sum()
                        })
                        .collect();
                }
            }
        }
        let n = xs.len() as f64;
        for v in grad.weights.iter_mut().chain(grad.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g /= n);
        }
        (loss / n, grad)
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let total: usize = self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum();
        assert_eq!(params.len(), total, "parameter count mismatch");
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
    }
}

impl Classifier for Mlp {
    fn predict_proba(&self, x: &[f64]) -> ConfidenceVector {
        let pre = self.forward_trace(x);
        ConfidenceVector::from_simplex(softmax(pre.last().expect("at least one layer")))
    }

    fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}
