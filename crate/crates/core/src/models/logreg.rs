use serde::{Deserialize, Serialize};

use super::{check_trainable, softmax, Classifier, ConfidenceVector, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Multinomial logistic regression fit by full-batch gradient descent on
/// mean cross-entropy. At least two classes must be present; any others
/// absent from the training set keep a shrinking but nonzero probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    /// `num_classes x dim`, row-major by class.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LogisticRegression {
    pub fn train(train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        check_trainable(train)?;
        let first = train.labels()[0];
        if train.labels().iter().all(|&y| y == first) {
            return Err(Error::Training("only one class present in training data".into()));
        }
        let (c, d, n) = (train.num_classes(), train.dim(), train.len() as f64);
        let mut model = Self {
            weights: vec![vec![0.0; d]; c],
            bias: vec![0.0; c],
        };
        for epoch in 0..cfg.epochs {
            let mut grad_w = vec![vec![0.0; d]; c];
            let mut grad_b = vec![0.0; c];
            let mut loss = 0.0;
            for (x, &y) in train.features().iter().zip(train.labels()) {
                let p = softmax(&model.logits(x));
                loss -= p[y].max(f64::MIN_POSITIVE).ln();
                for k in 0..c {
                    let err = p[k] - if k == y { 1.0 } else { 0.0 };
                    grad_b[k] += err;
                    for (g, xi) in grad_w[k].iter_mut().zip(x) {
                        *g += err * xi;
                    }
                }
            }
            if !(loss / n).is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let step = cfg.learning_rate / n;
            for k in 0..c {
                model.bias[k] -= step * grad_b[k];
                for (w, g) in model.weights[k].iter_mut().zip(&grad_w[k]) {
                    *w -= step * g;
                }
            }
        }
        if model
            .bias
            .iter()
            .chain(model.weights.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Diverged { epoch: cfg.epochs });
        }
        Ok(model)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
            .collect()
    }
}

impl Classifier for LogisticRegression {
    fn predict_proba(&self, x: &[f64]) -> ConfidenceVector {
        ConfidenceVector::from_simplex(softmax(&self.logits(x)))
    }

    fn num_classes(&self) -> usize {
        self.bias.len()
    }
}
