//! Target classifiers behind a common confidence-vector interface.

mod forest;
mod logreg;
mod mlp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub use forest::{DecisionTree, TreeEnsemble};
pub use logreg::LogisticRegression;
pub use mlp::{Mlp, MlpGradient};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A point on the probability simplex, one entry per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceVector(Vec<f64>);

impl ConfidenceVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("confidence vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::Invalid(format!(
                "confidence entries must lie in [0, 1]: {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Invalid(format!("confidence vector sums to {total}")));
        }
        Ok(Self(probs))
    }

    /// Skips validation. For outputs of softmax or averages of valid vectors.
    pub(crate) fn from_simplex(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self(probs)
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Self {
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Self(v)
    }

    /// Element-wise mean. Panics on an empty slice or mixed lengths.
    pub fn mean(vectors: &[&ConfidenceVector]) -> Self {
        assert!(!vectors.is_empty(), "mean of no confidence vectors");
        let c = vectors[0].len();
        let mut acc = vec![0.0; c];
        for v in vectors {
            assert_eq!(v.len(), c, "confidence vectors of different lengths");
            for (a, p) in acc.iter_mut().zip(&v.0) {
                *a += p;
            }
        }
        let n = vectors.len() as f64;
        Self(acc.into_iter().map(|a| a / n).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A trained model that maps a feature vector to class probabilities.
pub trait Classifier: Send + Sync {
    fn predict_proba(&self, x: &[f64]) -> ConfidenceVector;

    fn num_classes(&self) -> usize;

    fn predicted_label(&self, x: &[f64]) -> usize {
        self.predict_proba(x).argmax()
    }
}

/// Predicts every row in parallel; output order follows input order.
pub fn predict_batch<M: Classifier + ?Sized>(model: &M, rows: &[Vec<f64>]) -> Vec<ConfidenceVector> {
    rows.par_iter().map(|x| model.predict_proba(x)).collect()
}

/// Fraction of samples whose predicted label matches the ground truth.
pub fn task_accuracy<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let correct = (0..data.len())
        .filter(|&i| model.predicted_label(data.feature(i)) == data.label(i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    TreeEnsemble,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logreg => "logreg",
            ModelKind::TreeEnsemble => "tree_ensemble",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters for any model kind. Fields a kind does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::trees")]
    pub trees: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
    /// Features considered per split; `None` means `ceil(sqrt(d))`.
    #[serde(default)]
    pub max_features: Option<usize>,
    #[serde(default = "defaults::leaf_alpha")]
    pub leaf_alpha: f64,
    pub seed: u64,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.5
    }
    pub fn epochs() -> usize {
        500
    }
    pub fn hidden() -> Vec<usize> {
        vec![64, 32]
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn trees() -> usize {
        15
    }
    pub fn leaf_alpha() -> f64 {
        1e-3
    }
}

impl TrainConfig {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        Self {
            kind,
            learning_rate: defaults::learning_rate(),
            epochs: defaults::epochs(),
            hidden: defaults::hidden(),
            batch_size: defaults::batch_size(),
            trees: defaults::trees(),
            max_depth: None,
            max_features: None,
            leaf_alpha: defaults::leaf_alpha(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("train config: {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.trees == 0 {
            return bad("trees must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.max_depth == Some(0) || self.max_features == Some(0) {
            return bad("max_depth and max_features must be positive when set");
        }
        if !(self.leaf_alpha > 0.0 && self.leaf_alpha.is_finite()) {
            return bad("leaf_alpha must be positive");
        }
        Ok(())
    }
}

pub(crate) fn check_trainable(train: &Dataset) -> Result<()> {
    if train.num_classes() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 classes, dataset declares {}",
            train.num_classes()
        )));
    }
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    Ok(())
}

/// Any of the supported trained models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Logreg(LogisticRegression),
    TreeEnsemble(TreeEnsemble),
    Mlp(Mlp),
}

impl Model {
    pub fn train(train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ModelKind::Logreg => Model::Logreg(LogisticRegression::train(train, cfg)?),
            ModelKind::TreeEnsemble => Model::TreeEnsemble(TreeEnsemble::train(train, cfg)?),
            ModelKind::Mlp => Model::Mlp(Mlp::train(train, cfg)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Logreg(_) => ModelKind::Logreg,
            Model::TreeEnsemble(_) => ModelKind::TreeEnsemble,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }
}

impl Classifier for Model {
    fn predict_proba(&self, x: &[f64]) -> ConfidenceVector {
        match self {
            Model::Logreg(m) => m.predict_proba(x),
            Model::TreeEnsemble(m) => m.predict_proba(x),
            Model::Mlp(m) => m.predict_proba(x),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Model::Logreg(m) => m.num_classes(),
            Model::TreeEnsemble(m) => m.num_classes(),
            Model::Mlp(m) => m.num_classes(),
        }
    }
}

/// Versioned on-disk form of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: Model,
}

impl ModelDocument {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(config: TrainConfig, model: Model) -> Self {
        Self {
            format_version: Self::FORMAT_VERSION,
            config,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s).map_err(|e| Error::Invalid(e.to_string()))?;
        if doc.format_version != Self::FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc)
    }
}
