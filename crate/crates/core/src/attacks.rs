//! Membership inference attacks: a shadow-model attack and three
//! threshold attacks on confidence-vector statistics.
//!
//! Attacks only ever see [`AttackQuery`] values, which carry no membership
//! bit. Membership appears in [`AttackSample`] (shadow data the adversary
//! generated itself) and inside [`evaluate_attack`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::defense::{defend, query_rng, CandidateIndex, DefenseConfig};
use crate::error::{Error, Result};
use crate::models::{
    predict_batch, Classifier, ConfidenceVector, LogisticRegression, Model, ModelKind, TrainConfig,
};

const MENTR_CLAMP: f64 = 1e-12;

/// What an attacker observes about one record.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackQuery {
    pub confidence: ConfidenceVector,
    pub true_label: usize,
}

/// Shadow-side record with known membership.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSample {
    pub query: AttackQuery,
    pub member: bool,
}

pub trait MembershipAttack: Send + Sync {
    fn name(&self) -> &str;

    /// Attack statistic for the record; larger is not necessarily "more member".
    fn score(&self, q: &AttackQuery) -> f64;

    fn infer(&self, q: &AttackQuery) -> bool;
}

fn check_label(v: &ConfidenceVector, label: usize) -> Result<()> {
    if label >= v.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: v.len(),
        });
    }
    Ok(())
}

/// Probability assigned to the true label.
pub fn confidence_score(v: &ConfidenceVector, true_label: usize) -> Result<f64> {
    check_label(v, true_label)?;
    Ok(v.get(true_label))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy_score(v: &ConfidenceVector) -> f64 {
    -v.probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `-(1 - p_y) ln p_y - sum_{i != y} p_i ln(1 - p_i)`, probabilities
/// clamped to `[1e-12, 1 - 1e-12]`.
pub fn modified_entropy_score(v: &ConfidenceVector, true_label: usize) -> Result<f64> {
    check_label(v, true_label)?;
    let clamp = |p: f64| p.clamp(MENTR_CLAMP, 1.0 - MENTR_CLAMP);
    let py = clamp(v.get(true_label));
    let mut score = -(1.0 - py) * py.ln();
    for (i, &p) in v.probs().iter().enumerate() {
        if i != true_label {
            let p = clamp(p);
            score -= p * (1.0 - p).ln();
        }
    }
    Ok(score)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Member iff score >= threshold.
    AtLeast,
    /// Member iff score <= threshold.
    AtMost,
}

impl Direction {
    pub fn is_member(self, score: f64, threshold: f64) -> bool {
        match self {
            Direction::AtLeast => score >= threshold,
            Direction::AtMost => score <= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub thresholds: Vec<f64>,
    pub direction: Direction,
}

impl ThresholdTable {
    pub fn is_member(&self, class: usize, score: f64) -> bool {
        self.direction.is_member(score, self.thresholds[class])
    }
}

/// Balanced accuracy of `threshold` over `(score, member)` pairs.
fn balanced_accuracy(points: &[(f64, bool)], threshold: f64, direction: Direction) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for &(s, member) in points {
        let called = direction.is_member(s, threshold);
        if member {
            p += 1;
            tp += usize::from(called);
        } else {
            n += 1;
            tn += usize::from(!called);
        }
    }
    let rate = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
    0.5 * (rate(tp, p) + rate(tn, n))
}

/// Threshold maximizing balanced accuracy. Candidates are the midpoints
/// between consecutive distinct scores plus one point beyond each end;
/// ties go to the smaller threshold.
fn sweep(points: &[(f64, bool)], direction: Direction) -> (f64, f64) {
    let mut scores: Vec<f64> = points.iter().map(|p| p.0).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(scores[0] - 1.0);
    candidates.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(scores[scores.len() - 1] + 1.0);
    let mut best = (candidates[0], balanced_accuracy(points, candidates[0], direction));
    for &c in &candidates[1..] {
        let acc = balanced_accuracy(points, c, direction);
        if acc > best.1 {
            best = (c, acc);
        }
    }
    best
}

/// Fits one threshold per class from `(class, score, member)` shadow
/// triples. Classes lacking either members or non-members, and every class
/// when `per_class` is off, use the global threshold.
pub fn fit_thresholds(
    scored: &[(usize, f64, bool)],
    num_classes: usize,
    direction: Direction,
    per_class: bool,
) -> Result<ThresholdTable> {
    if scored.is_empty() {
        return Err(Error::Empty("shadow attack samples"));
    }
    let all: Vec<(f64, bool)> = scored.iter().map(|&(_, s, m)| (s, m)).collect();
    let (global, _) = sweep(&all, direction);
    let thresholds = (0..num_classes)
        .map(|c| {
            if !per_class {
                return global;
            }
            let points: Vec<(f64, bool)> = scored
                .iter()
                .filter(|t| t.0 == c)
                .map(|&(_, s, m)| (s, m))
                .collect();
            let has_both = points.iter().any(|p| p.1) && points.iter().any(|p| !p.1);
            if has_both {
                sweep(&points, direction).0
            } else {
                global
            }
        })
        .collect();
    Ok(ThresholdTable {
        thresholds,
        direction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Confidence,
    Entropy,
    ModifiedEntropy,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Confidence => "confidence",
            MetricKind::Entropy => "entropy",
            MetricKind::ModifiedEntropy => "modified_entropy",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MetricKind::Confidence => Direction::AtLeast,
            MetricKind::Entropy | MetricKind::ModifiedEntropy => Direction::AtMost,
        }
    }

    /// `(threshold class, score)`. Entropy uses no ground truth, so it keys
    /// on the predicted label.
    pub fn evaluate(self, q: &AttackQuery) -> Result<(usize, f64)> {
        Ok(match self {
            MetricKind::Confidence => (q.true_label, confidence_score(&q.confidence, q.true_label)?),
            MetricKind::Entropy => (q.confidence.argmax(), entropy_score(&q.confidence)),
            MetricKind::ModifiedEntropy => {
                (q.true_label, modified_entropy_score(&q.confidence, q.true_label)?)
            }
        })
    }
}

/// Threshold attack on a confidence-vector statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricAttack {
    pub kind: MetricKind,
    pub table: ThresholdTable,
}

impl MetricAttack {
    pub fn fit(
        samples: &[AttackSample],
        kind: MetricKind,
        num_classes: usize,
        per_class: bool,
    ) -> Result<Self> {
        let scored = samples
            .iter()
            .map(|s| kind.evaluate(&s.query).map(|(c, v)| (c, v, s.member)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            table: fit_thresholds(&scored, num_classes, kind.direction(), per_class)?,
        })
    }
}

impl MembershipAttack for MetricAttack {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn score(&self, q: &AttackQuery) -> f64 {
        self.kind.evaluate(q).map_or(f64::NAN, |(_, s)| s)
    }

    fn infer(&self, q: &AttackQuery) -> bool {
        match self.kind.evaluate(q) {
            Ok((class, s)) => self.table.is_member(class, s),
            Err(_) => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowEnsembleConfig {
    #[serde(default = "default_num_shadow_models")]
    pub num_shadow_models: usize,
    /// Architecture the adversary trains its shadows with.
    pub shadow_model: TrainConfig,
    /// One attack classifier per true class instead of a single one.
    #[serde(default)]
    pub per_class_models: bool,
    #[serde(default = "default_attack_learning_rate")]
    pub attack_learning_rate: f64,
    #[serde(default = "default_attack_epochs")]
    pub attack_epochs: usize,
    pub seed: u64,
}

fn default_num_shadow_models() -> usize {
    4
}

fn default_attack_learning_rate() -> f64 {
    1.0
}

fn default_attack_epochs() -> usize {
    1000
}

impl ShadowEnsembleConfig {
    pub fn new(shadow_model: TrainConfig, seed: u64) -> Self {
        Self {
            num_shadow_models: default_num_shadow_models(),
            shadow_model,
            per_class_models: false,
            attack_learning_rate: default_attack_learning_rate(),
            attack_epochs: default_attack_epochs(),
            seed,
        }
    }
}

/// Trains the shadow models on disjoint slices of `pool` and labels their
/// outputs: each slice's training half are members, the other half are
/// non-members. With `defense`, every shadow output first passes through
/// the defense built on that shadow's own training set.
pub fn collect_shadow_samples(
    pool: &Dataset,
    cfg: &ShadowEnsembleConfig,
    defense: Option<&DefenseConfig>,
) -> Result<Vec<AttackSample>> {
    if cfg.num_shadow_models == 0 {
        return Err(Error::Invalid("num_shadow_models must be at least 1".into()));
    }
    let slice = pool.len() / cfg.num_shadow_models;
    let half = slice / 2;
    if half == 0 {
        return Err(Error::Training(format!(
            "shadow pool of {} samples is too small for {} shadow models",
            pool.len(),
            cfg.num_shadow_models
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut samples = Vec::with_capacity(2 * half * cfg.num_shadow_models);
    for k in 0..cfg.num_shadow_models {
        let part = &order[k * slice..k * slice + 2 * half];
        let train = pool.subset(&part[..half]);
        let held_out = pool.subset(&part[half..]);
        let mut model_cfg = cfg.shadow_model.clone();
        model_cfg.seed = cfg.shadow_model.seed.wrapping_add(k as u64);
        let model = Model::train(&train, &model_cfg)
            .map_err(|e| Error::Training(format!("shadow model {k}: {e}")))?;

        let outputs = |data: &Dataset, first_ordinal: u64| -> Result<Vec<ConfidenceVector>> {
            match defense {
                None => Ok(predict_batch(&model, data.features())),
                Some(def) => {
                    let index = CandidateIndex::build(&model, &train)?;
                    let stream_seed = def.seed.wrapping_add(k as u64 + 1);
                    (0..data.len())
                        .map(|i| {
                            let mut rng = query_rng(stream_seed, first_ordinal + i as u64);
                            defend(data.feature(i), &model, &index, def, &mut rng).map(|o| o.smoothed)
                        })
                        .collect()
                }
            }
        };
        for (data, member, first) in [(&train, true, 0u64), (&held_out, false, half as u64)] {
            for (i, confidence) in outputs(data, first)?.into_iter().enumerate() {
                samples.push(AttackSample {
                    query: AttackQuery {
                        confidence,
                        true_label: data.label(i),
                    },
                    member,
                });
            }
        }
    }
    Ok(samples)
}

/// Z-score parameters fitted on the attack training features.
#[derive(Clone, Debug, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let scale = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BinaryAttackModel {
    standardizer: Standardizer,
    model: LogisticRegression,
}

impl BinaryAttackModel {
    fn fit(rows: Vec<Vec<f64>>, members: Vec<bool>, cfg: &ShadowEnsembleConfig) -> Result<Self> {
        let standardizer = Standardizer::fit(&rows);
        let features = rows.iter().map(|r| standardizer.apply(r)).collect();
        let labels = members.iter().map(|&m| usize::from(m)).collect();
        let data = Dataset::new(features, labels, 2)?;
        let mut train_cfg = TrainConfig::new(ModelKind::Logreg, cfg.seed);
        train_cfg.learning_rate = cfg.attack_learning_rate;
        train_cfg.epochs = cfg.attack_epochs;
        let model = LogisticRegression::train(&data, &train_cfg)?;
        Ok(Self { standardizer, model })
    }

    fn member_probability(&self, row: &[f64]) -> f64 {
        self.model.predict_proba(&self.standardizer.apply(row)).get(1)
    }
}

/// Learned attack: logistic regression on the sorted confidence vector,
/// plus a one-hot true label when a single model serves all classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowAttack {
    num_classes: usize,
    global: BinaryAttackModel,
    per_class: Vec<Option<BinaryAttackModel>>,
    training_accuracy: f64,
}

impl ShadowAttack {
    fn features(q: &AttackQuery, with_label: bool) -> Vec<f64> {
        let mut sorted = q.confidence.probs().to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if with_label {
            sorted.extend((0..q.confidence.len()).map(|c| if c == q.true_label { 1.0 } else { 0.0 }));
        }
        sorted
    }

    pub fn fit(samples: &[AttackSample], num_classes: usize, cfg: &ShadowEnsembleConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("shadow attack samples"));
        }
        if !(samples.iter().any(|s| s.member) && samples.iter().any(|s| !s.member)) {
            return Err(Error::Training(
                "shadow samples need both members and non-members".into(),
            ));
        }
        let global = BinaryAttackModel::fit(
            samples.iter().map(|s| Self::features(&s.query, true)).collect(),
            samples.iter().map(|s| s.member).collect(),
            cfg,
        )?;
        let per_class = (0..num_classes)
            .map(|c| {
                if !cfg.per_class_models {
                    return Ok(None);
                }
                let rows: Vec<&AttackSample> = samples.iter().filter(|s| s.query.true_label == c).collect();
                if !(rows.iter().any(|s| s.member) && rows.iter().any(|s| !s.member)) {
                    return Ok(None);
                }
                BinaryAttackModel::fit(
                    rows.iter().map(|s| Self::features(&s.query, false)).collect(),
                    rows.iter().map(|s| s.member).collect(),
                    cfg,
                )
                .map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut attack = Self {
            num_classes,
            global,
            per_class,
            training_accuracy: 0.0,
        };
        let correct = samples
            .iter()
            .filter(|s| attack.infer(&s.query) == s.member)
            .count();
        attack.training_accuracy = correct as f64 / samples.len() as f64;
        Ok(attack)
    }

    /// Generates shadow data from `pool` and fits the attack on it.
    pub fn fit_on_pool(
        pool: &Dataset,
        cfg: &ShadowEnsembleConfig,
        defense: Option<&DefenseConfig>,
    ) -> Result<Self> {
        let samples = collect_shadow_samples(pool, cfg, defense)?;
        Self::fit(&samples, pool.num_classes(), cfg)
    }

    /// Accuracy on the shadow-derived samples it was fit on.
    pub fn training_accuracy(&self) -> f64 {
        self.training_accuracy
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

impl MembershipAttack for ShadowAttack {
    fn name(&self) -> &str {
        "shadow"
    }

    /// Probability that the record was a training member.
    fn score(&self, q: &AttackQuery) -> f64 {
        match self.per_class.get(q.true_label).and_then(Option::as_ref) {
            Some(model) => model.member_probability(&Self::features(q, false)),
            None => self.global.member_probability(&Self::features(q, true)),
        }
    }

    fn infer(&self, q: &AttackQuery) -> bool {
        self.score(q) > 0.5
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreSummary {
    fn of(scores: &[f64]) -> Self {
        Self {
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            min: scores.iter().cloned().fold(f64::INFINITY, f64::min),
            max: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack: String,
    pub accuracy: f64,
    pub n_eval: usize,
    pub member_scores: ScoreSummary,
    pub nonmember_scores: ScoreSummary,
}

/// Accuracy of `attack` over balanced member / non-member sets.
pub fn evaluate_attack<A: MembershipAttack + ?Sized>(
    attack: &A,
    members: &[AttackQuery],
    nonmembers: &[AttackQuery],
) -> Result<AttackReport> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if members.len() != nonmembers.len() {
        return Err(Error::Unbalanced {
            members: members.len(),
            nonmembers: nonmembers.len(),
        });
    }
    let hits = members.iter().filter(|q| attack.infer(q)).count()
        + nonmembers.iter().filter(|q| !attack.infer(q)).count();
    let n = members.len() + nonmembers.len();
    let scores = |qs: &[AttackQuery]| qs.iter().map(|q| attack.score(q)).collect::<Vec<_>>();
    Ok(AttackReport {
        attack: attack.name().to_string(),
        accuracy: hits as f64 / n as f64,
        n_eval: n,
        member_scores: ScoreSummary::of(&scores(members)),
        nonmember_scores: ScoreSummary::of(&scores(nonmembers)),
    })
}
