//! Bagged CART ensemble. Trees grow until leaves are pure, so the ensemble
//! memorizes its training set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_trainable, Classifier, ConfidenceVector, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        probs: Vec<f64>,
    },
    Split {
        feature: usize,
        /// `x[feature] <= threshold` goes left.
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

struct Grower<'a> {
    data: &'a Dataset,
    max_depth: Option<usize>,
    max_features: usize,
    alpha: f64,
    nodes: Vec<Node>,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

impl Grower<'_> {
    fn leaf(&self, counts: &[usize], total: usize) -> Node {
        let c = counts.len() as f64;
        let denom = total as f64 + c * self.alpha;
        Node::Leaf {
            probs: counts.iter().map(|&k| (k as f64 + self.alpha) / denom).collect(),
        }
    }

    /// Best `(weighted impurity, feature, threshold)` over `features`.
    fn best_split(&self, rows: &[usize], features: &[usize]) -> Option<(f64, usize, f64)> {
        let c = self.data.num_classes();
        let n = rows.len();
        let mut total = vec![0usize; c];
        for &r in rows {
            total[self.data.label(r)] += 1;
        }
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for &f in features {
            sorted.sort_by(|&a, &b| {
                self.data.feature(a)[f]
                    .total_cmp(&self.data.feature(b)[f])
                    .then(a.cmp(&b))
            });
            let mut left = vec![0usize; c];
            for i in 0..n - 1 {
                left[self.data.label(sorted[i])] += 1;
                let lo = self.data.feature(sorted[i])[f];
                let hi = self.data.feature(sorted[i + 1])[f];
                if lo >= hi {
                    continue;
                }
                let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let (nl, nr) = (i + 1, n - i - 1);
                let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.is_none_or(|(s, _, _)| score < s) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some((score, f, threshold));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let c = self.data.num_classes();
        let mut counts = vec![0usize; c];
        for &r in rows {
            counts[self.data.label(r)] += 1;
        }
        let id = self.nodes.len();
        let pure = counts.iter().filter(|&&k| k > 0).count() <= 1;
        if pure || self.max_depth.is_some_and(|m| depth >= m) {
            let leaf = self.leaf(&counts, rows.len());
            self.nodes.push(leaf);
            return id;
        }

        let d = self.data.dim();
        let mut features: Vec<usize> = (0..d).collect();
        features.shuffle(rng);
        let mut split = self.best_split(rows, &features[..self.max_features.min(d)]);
        if split.is_none() && self.max_features < d {
            split = self.best_split(rows, &features);
        }
        let Some((_, feature, threshold)) = split else {
            let leaf = self.leaf(&counts, rows.len());
            self.nodes.push(leaf);
            return id;
        };

        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.data.feature(i)[feature] <= threshold);
        self.nodes.push(Node::Leaf { probs: Vec::new() });
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl DecisionTree {
    /// Grows a tree on `rows` (indices into `data`, repeats allowed).
    pub fn grow(
        data: &Dataset,
        rows: &[usize],
        max_depth: Option<usize>,
        max_features: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut grower = Grower {
            data,
            max_depth,
            max_features: max_features.max(1),
            alpha,
            nodes: Vec::new(),
        };
        grower.grow(rows, 0, rng);
        Self { nodes: grower.nodes }
    }

    pub fn leaf_probs(&self, x: &[f64]) -> &[f64] {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { probs } => return probs,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    trees: Vec<DecisionTree>,
    num_classes: usize,
}

impl TreeEnsemble {
    pub fn train(train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        check_trainable(train)?;
        let n = train.len();
        let max_features = cfg
            .max_features
            .unwrap_or_else(|| (train.dim() as f64).sqrt().ceil() as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let trees = (0..cfg.trees)
            .map(|_| {
                let bag: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                DecisionTree::grow(train, &bag, cfg.max_depth, max_features, cfg.leaf_alpha, &mut rng)
            })
            .collect();
        Ok(Self {
            trees,
            num_classes: train.num_classes(),
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
}

impl Classifier for TreeEnsemble {
    fn predict_proba(&self, x: &[f64]) -> ConfidenceVector {
        let mut acc = vec![0.0; self.num_classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.leaf_probs(x)) {
                *a += p;
            }
        }
        let t = self.trees.len() as f64;
        ConfidenceVector::from_simplex(acc.into_iter().map(|a| a / t).collect())
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_csv, normalize, synth_blobs, Norm};
    use crate::models::{task_accuracy, ModelKind};

    #[test]
    fn pure_single_feature_split() {
        let ds = Dataset::new(
            vec![vec![0.1, 0.5], vec![0.2, 0.5], vec![0.8, 0.5], vec![0.9, 0.5]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        let rows: Vec<usize> = (0..4).collect();
        let tree = DecisionTree::grow(&ds, &rows, None, 2, 1e-3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(tree.node_count(), 3);
        let mut cfg = TrainConfig::new(ModelKind::TreeEnsemble, 4);
        cfg.trees = 1;
        let a = TreeEnsemble::train(&ds, &cfg).unwrap();
        let b = TreeEnsemble::train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn leaves_are_smoothed() {
        let ds = Dataset::new(vec![vec![0.0], vec![1.0]], vec![0, 1], 2).unwrap();
        let tree = DecisionTree::grow(&ds, &[0, 1], None, 1, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(tree.leaf_probs(&[0.0]), [1.5 / 2.0, 0.5 / 2.0]);
    }

    #[test]
    fn memorizes_blobs() {
        let ds = synth_blobs(4, 6, 40, 0.4, 2, Norm::L2).unwrap();
        let model = TreeEnsemble::train(&ds, &TrainConfig::new(ModelKind::TreeEnsemble, 3)).unwrap();
        assert!(task_accuracy(&model, &ds).unwrap() >= 0.99);
    }

    #[test]
    fn members_more_confident_than_held_out_on_iris() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/iris.csv");
        let raw = load_csv(path, "species", &Default::default()).unwrap();
        let (ds, _) = normalize(&raw, Norm::L2).unwrap();
        let plan = crate::data::split(ds.len(), (0.5, 0.4, 0.1), 10, 17).unwrap();
        let train = ds.subset(&plan.target_train);
        let test = ds.subset(&plan.target_test);
        let model = TreeEnsemble::train(&train, &TrainConfig::new(ModelKind::TreeEnsemble, 5)).unwrap();
        let mean_max = |d: &Dataset| {
            d.features()
                .iter()
                .map(|x| model.predict_proba(x).probs().iter().cloned().fold(0.0, f64::max))
                .sum::<f64>()
                / d.len() as f64
        };
        let (member, held_out) = (mean_max(&train), mean_max(&test));
        assert!(member > 0.95, "{member}");
        assert!(held_out < member, "{held_out} vs {member}");
    }
}
