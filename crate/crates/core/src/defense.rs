//! Neighborhood Blending.
//!
//! A query's confidence vector is replaced by the mean confidence vector of
//! `m` training samples drawn from the bucket of training points that share
//! the query's predicted label. Neighbours are chosen by the exponential
//! mechanism over `m`-subsets with utility `-||x_i - q||_p`, realized either
//! with Gumbel-top-m noise or by exact enumeration.
//!
//! The enumeration helpers at the bottom ([`subset_log_distribution`],
//! [`privacy_ratio_audit`], [`utility_tail_audit`]) are exact oracles for
//! small candidate sets and are what the audit subcommand runs.

use std::collections::BTreeMap;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Norm};
use crate::error::{Error, Result};
use crate::models::{predict_batch, Classifier, ConfidenceVector};

/// Largest number of outcomes the exact samplers will enumerate.
pub const ENUMERATION_CAP: u128 = 200_000;

/// Utility sensitivity under substitution in the unit ball.
pub const DEFAULT_DELTA_U: f64 = 2.0;

const GUMBEL_U_MIN: f64 = 1e-300;
const GUMBEL_U_MAX: f64 = 1.0 - 1e-16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Gumbel,
    ExactEm,
}

impl SamplerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::Gumbel => "gumbel",
            SamplerMode::ExactEm => "exact_em",
        }
    }
}

/// Serde for privacy budgets: a number, or the string `"inf"` for the
/// noiseless limit (JSON has no infinity literal).
pub mod epsilon_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(eps: &f64, s: S) -> Result<S::Ok, S::Error> {
        if eps.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*eps)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => {
                Ok(f64::INFINITY)
            }
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid epsilon `{t}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub m: usize,
    /// `f64::INFINITY` selects the noiseless nearest-neighbour limit.
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub p: Norm,
    pub delta_u: f64,
    pub sampler: SamplerMode,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn new(m: usize, epsilon: f64, seed: u64) -> Self {
        Self {
            m,
            epsilon,
            p: Norm::L2,
            delta_u: DEFAULT_DELTA_U,
            sampler: SamplerMode::Gumbel,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Invalid("defense m must be at least 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Invalid(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.delta_u > 0.0 && self.delta_u.is_finite()) {
            return Err(Error::Invalid(format!(
                "delta_u must be positive, got {}",
                self.delta_u
            )));
        }
        Ok(())
    }
}

/// Independent per-query random stream, so query `ordinal` gets the same
/// draws whether queries run serially or in parallel.
pub fn query_rng(seed: u64, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    rng
}

/// Training set partitioned by model-predicted label, with confidence
/// vectors computed once at build time.
#[derive(Clone, Debug)]
pub struct CandidateIndex {
    buckets: Vec<Vec<usize>>,
    features: Vec<Vec<f64>>,
    vectors: Vec<ConfidenceVector>,
}

impl CandidateIndex {
    pub fn build<M: Classifier + ?Sized>(model: &M, train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let vectors = predict_batch(model, train.features());
        let mut buckets = vec![Vec::new(); model.num_classes()];
        for (i, v) in vectors.iter().enumerate() {
            buckets[v.argmax()].push(i);
        }
        Ok(Self {
            buckets,
            features: train.features().to_vec(),
            vectors,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.buckets.len()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Training indices whose predicted label is `label`, ascending.
    pub fn bucket(&self, label: usize) -> &[usize] {
        &self.buckets[label]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn vector(&self, i: usize) -> &ConfidenceVector {
        &self.vectors[i]
    }

    pub fn smallest_nonempty_bucket(&self) -> Option<usize> {
        self.buckets.iter().map(Vec::len).filter(|&n| n > 0).min()
    }
}

/// Neighbourhood size heuristic: 5 when every populated label bucket holds
/// at least 50 samples, 3 otherwise.
pub fn default_m(index: &CandidateIndex) -> usize {
    match index.smallest_nonempty_bucket() {
        Some(n) if n >= 50 => 5,
        _ => 3,
    }
}

/// `u_i = -||x_i - q||_p` for every candidate.
pub fn utility_scores(q: &[f64], candidates: &[&[f64]], p: Norm) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|x| {
            if x.len() != q.len() {
                return Err(Error::DimensionMismatch {
                    expected: q.len(),
                    actual: x.len(),
                });
            }
            Ok(-p.distance(x, q))
        })
        .collect()
}

/// `phi_i = epsilon * u_i / (2 * delta_u)`. Only meaningful for finite epsilon.
pub fn logits(utilities: &[f64], epsilon: f64, delta_u: f64) -> Vec<f64> {
    debug_assert!(epsilon.is_finite(), "infinite epsilon has no finite logits");
    if epsilon == 0.0 {
        return vec![0.0; utilities.len()];
    }
    let scale = epsilon / (2.0 * delta_u);
    utilities.iter().map(|u| scale * u).collect()
}

/// Indices of the `m` largest scores, lowest index first among ties.
/// Returned in ascending index order.
pub fn top_m(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > scores.len() {
        return Err(Error::TooFewCandidates {
            m,
            available: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One standard Gumbel draw, `-ln(-ln U)` with `U` kept off `{0, 1}`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(GUMBEL_U_MIN, GUMBEL_U_MAX);
    -(-u.ln()).ln()
}

/// Perturbs each logit with Gumbel noise and keeps the top `m`.
pub fn gumbel_top_m<R: Rng + ?Sized>(logits: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m > logits.len() {
        return Err(Error::TooFewCandidates {
            m,
            available: logits.len(),
        });
    }
    let perturbed: Vec<f64> = logits.iter().map(|phi| phi + gumbel(rng)).collect();
    top_m(&perturbed, m)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).product()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_subset_count(n: usize, m: usize) -> Result<u128> {
    if m > n {
        return Err(Error::TooFewCandidates { m, available: n });
    }
    let count = binomial(n, m);
    if count > ENUMERATION_CAP {
        return Err(Error::EnumerationCap {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(count)
}

/// Exponential mechanism over all `m`-subsets, enumerated once so repeated
/// draws are cheap.
#[derive(Clone, Debug)]
pub struct ExactEmSampler {
    subsets: Vec<Vec<usize>>,
    /// Normalized log-probabilities.
    log_probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ExactEmSampler {
    pub fn new(utilities: &[f64], m: usize, epsilon: f64, delta_u: f64) -> Result<Self> {
        check_subset_count(utilities.len(), m)?;
        let subsets: Vec<Vec<usize>> = (0..utilities.len()).combinations(m).collect();
        let set_utility = |s: &Vec<usize>| s.iter().map(|&i| utilities[i]).sum::<f64>();
        let log_weights: Vec<f64> = if epsilon.is_infinite() {
            let best = top_m(utilities, m)?;
            subsets
                .iter()
                .map(|s| if *s == best { 0.0 } else { f64::NEG_INFINITY })
                .collect()
        } else {
            let scale = epsilon / (2.0 * delta_u);
            subsets
                .iter()
                .map(|s| {
                    if epsilon == 0.0 {
                        0.0
                    } else {
                        scale * set_utility(s)
                    }
                })
                .collect()
        };
        let norm = log_sum_exp(&log_weights);
        let log_probs: Vec<f64> = log_weights.iter().map(|w| w - norm).collect();
        let mut acc = 0.0;
        let cumulative = log_probs
            .iter()
            .map(|lp| {
                acc += lp.exp();
                acc
            })
            .collect();
        Ok(Self {
            subsets,
            log_probs,
            cumulative,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[usize] {
        let total = *self.cumulative.last().expect("at least one subset");
        let r = rng.gen::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= r);
        &self.subsets[k.min(self.subsets.len() - 1)]
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// One exact exponential-mechanism draw of an `m`-subset.
pub fn exact_em_sample<R: Rng + ?Sized>(
    utilities: &[f64],
    m: usize,
    epsilon: f64,
    delta_u: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(ExactEmSampler::new(utilities, m, epsilon, delta_u)?
        .sample(rng)
        .to_vec())
}

/// Chooses `m` of the candidates with the configured sampler.
pub fn select<R: Rng + ?Sized>(
    utilities: &[f64],
    m: usize,
    epsilon: f64,
    delta_u: f64,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if epsilon.is_infinite() {
        return top_m(utilities, m);
    }
    match mode {
        SamplerMode::Gumbel => gumbel_top_m(&logits(utilities, epsilon, delta_u), m, rng),
        SamplerMode::ExactEm => exact_em_sample(utilities, m, epsilon, delta_u, rng),
    }
}

/// Exact log-probability of every `m`-subset under either sampler.
///
/// For `ExactEm` this is `eps * U(I) / (2 delta_u)` normalized. For `Gumbel`
/// it is the Plackett-Luce set marginal: the sum over the `m!` orderings of
/// a subset of the sequential without-replacement softmax probabilities.
pub fn subset_log_distribution(
    utilities: &[f64],
    m: usize,
    epsilon: f64,
    delta_u: f64,
    mode: SamplerMode,
) -> Result<BTreeMap<Vec<usize>, f64>> {
    let count = check_subset_count(utilities.len(), m)?;
    match mode {
        SamplerMode::ExactEm => {
            let sampler = ExactEmSampler::new(utilities, m, epsilon, delta_u)?;
            Ok(sampler.subsets.into_iter().zip(sampler.log_probs).collect())
        }
        SamplerMode::Gumbel => {
            let orderings = count.saturating_mul(factorial(m));
            if orderings > ENUMERATION_CAP {
                return Err(Error::EnumerationCap {
                    count: orderings,
                    cap: ENUMERATION_CAP,
                });
            }
            if epsilon.is_infinite() {
                let best = top_m(utilities, m)?;
                return Ok((0..utilities.len())
                    .combinations(m)
                    .map(|s| {
                        let lp = if s == best { 0.0 } else { f64::NEG_INFINITY };
                        (s, lp)
                    })
                    .collect());
            }
            let phi = logits(utilities, epsilon, delta_u);
            let max = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = phi.iter().map(|p| (p - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            Ok((0..utilities.len())
                .combinations(m)
                .map(|subset| {
                    let per_order: Vec<f64> = subset
                        .iter()
                        .permutations(m)
                        .map(|order| {
                            let mut remaining = total;
                            let mut lp = 0.0;
                            for &&i in &order {
                                lp += weights[i].ln() - remaining.ln();
                                remaining -= weights[i];
                            }
                            lp
                        })
                        .collect();
                    (subset, log_sum_exp(&per_order))
                })
                .collect())
        }
    }
}

/// [`subset_log_distribution`] exponentiated.
pub fn subset_distribution(
    utilities: &[f64],
    m: usize,
    epsilon: f64,
    delta_u: f64,
    mode: SamplerMode,
) -> Result<BTreeMap<Vec<usize>, f64>> {
    Ok(subset_log_distribution(utilities, m, epsilon, delta_u, mode)?
        .into_iter()
        .map(|(s, lp)| (s, lp.exp()))
        .collect())
}

/// Largest `|ln P(I | S) - ln P(I | S')|` over all subsets, where `S'`
/// replaces candidate `k`'s utility. Both utilities are clipped to the
/// feasible range `[-2, 0]` first.
pub fn privacy_ratio_audit(
    utilities: &[f64],
    substituted: (usize, f64),
    m: usize,
    epsilon: f64,
    delta_u: f64,
    mode: SamplerMode,
) -> Result<f64> {
    let (k, new_u) = substituted;
    if k >= utilities.len() {
        return Err(Error::Invalid(format!(
            "substituted index {k} out of range for {} candidates",
            utilities.len()
        )));
    }
    let original: Vec<f64> = utilities.iter().map(|u| u.clamp(-2.0, 0.0)).collect();
    let mut adjacent = original.clone();
    adjacent[k] = new_u.clamp(-2.0, 0.0);
    let p = subset_log_distribution(&original, m, epsilon, delta_u, mode)?;
    let q = subset_log_distribution(&adjacent, m, epsilon, delta_u, mode)?;
    Ok(p.iter()
        .map(|(s, lp)| {
            let lq = q[s];
            if lp == &lq {
                0.0
            } else {
                (lp - lq).abs()
            }
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailAudit {
    pub opt: f64,
    pub threshold: f64,
    pub log_outcomes: f64,
    pub frequency: f64,
    /// `e^{-t}`.
    pub bound: f64,
    pub trials: usize,
}

/// Monte-Carlo frequency of exact-mechanism draws whose set utility falls
/// to `OPT - (2 delta_u / eps)(ln C(|S|, m) + t)` or below.
///
/// At infinite epsilon the threshold is the limit from below, so only
/// strictly suboptimal subsets count.
pub fn utility_tail_audit<R: Rng + ?Sized>(
    utilities: &[f64],
    m: usize,
    epsilon: f64,
    delta_u: f64,
    t: f64,
    trials: usize,
    rng: &mut R,
) -> Result<TailAudit> {
    if trials == 0 {
        return Err(Error::Invalid("tail audit needs at least one trial".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Invalid("tail audit needs epsilon > 0".into()));
    }
    let count = check_subset_count(utilities.len(), m)?;
    let sampler = ExactEmSampler::new(utilities, m, epsilon, delta_u)?;
    let set_utility = |s: &[usize]| s.iter().map(|&i| utilities[i]).sum::<f64>();
    let opt = sampler
        .subsets()
        .iter()
        .map(|s| set_utility(s))
        .fold(f64::NEG_INFINITY, f64::max);
    let log_outcomes = (count as f64).ln();
    let threshold = opt - 2.0 * delta_u / epsilon * (log_outcomes + t);
    let hits = (0..trials)
        .filter(|_| {
            let u = set_utility(sampler.sample(rng));
            if epsilon.is_infinite() {
                u < opt
            } else {
                u <= threshold
            }
        })
        .count();
    Ok(TailAudit {
        opt,
        threshold,
        log_outcomes,
        frequency: hits as f64 / trials as f64,
        bound: (-t).exp(),
        trials,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Fewer than `m` candidates; all of them were averaged.
    PartialBucket,
    /// No training sample shares the predicted label; output is unchanged.
    EmptyBucket,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSelection {
    /// Training indices, ascending.
    pub indices: Vec<usize>,
    pub utilities: Vec<f64>,
    pub mode: SamplerMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedOutput {
    pub original: ConfidenceVector,
    pub smoothed: ConfidenceVector,
    pub predicted_label: usize,
    pub selection: NeighborSelection,
    pub fallback: Option<Fallback>,
}

/// Runs the full defense for one query.
pub fn defend<M, R>(
    q: &[f64],
    model: &M,
    index: &CandidateIndex,
    cfg: &DefenseConfig,
    rng: &mut R,
) -> Result<SmoothedOutput>
where
    M: Classifier + ?Sized,
    R: Rng + ?Sized,
{
    let original = model.predict_proba(q);
    let label = original.argmax();
    let bucket = index.bucket(label);
    let unchanged = |fallback| SmoothedOutput {
        smoothed: original.clone(),
        original: original.clone(),
        predicted_label: label,
        selection: NeighborSelection {
            indices: Vec::new(),
            utilities: Vec::new(),
            mode: cfg.sampler,
        },
        fallback: Some(fallback),
    };
    if bucket.is_empty() {
        return Ok(unchanged(Fallback::EmptyBucket));
    }

    let candidates: Vec<&[f64]> = bucket.iter().map(|&i| index.feature(i)).collect();
    let utilities = utility_scores(q, &candidates, cfg.p)?;
    let (local, fallback) = if bucket.len() < cfg.m {
        ((0..bucket.len()).collect(), Some(Fallback::PartialBucket))
    } else {
        let picked = select(&utilities, cfg.m, cfg.epsilon, cfg.delta_u, cfg.sampler, rng)?;
        (picked, None)
    };

    let chosen: Vec<&ConfidenceVector> = local.iter().map(|&k| index.vector(bucket[k])).collect();
    let smoothed = ConfidenceVector::mean(&chosen);
    debug_assert_eq!(smoothed.argmax(), label);
    Ok(SmoothedOutput {
        original,
        smoothed,
        predicted_label: label,
        selection: NeighborSelection {
            indices: local.iter().map(|&k| bucket[k]).collect(),
            utilities: local.iter().map(|&k| utilities[k]).collect(),
            mode: cfg.sampler,
        },
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ConfidenceVector;

    /// Looks up fixed vectors by the first feature.
    struct Table(Vec<(f64, Vec<f64>)>);

    impl Classifier for Table {
        fn predict_proba(&self, x: &[f64]) -> ConfidenceVector {
            let row = self
                .0
                .iter()
                .min_by(|a, b| (a.0 - x[0]).abs().total_cmp(&(b.0 - x[0]).abs()))
                .unwrap();
            ConfidenceVector::new(row.1.clone()).unwrap()
        }
        fn num_classes(&self) -> usize {
            self.0[0].1.len()
        }
    }

    fn toy() -> (Table, Dataset) {
        let table = Table(vec![
            (0.0, vec![0.8, 0.2]),
            (0.1, vec![0.6, 0.4]),
            (0.5, vec![0.9, 0.1]),
            (0.9, vec![0.3, 0.7]),
        ]);
        let ds = Dataset::new(
            vec![vec![0.0], vec![0.1], vec![0.5], vec![0.9]],
            vec![0, 0, 0, 1],
            2,
        )
        .unwrap();
        (table, ds)
    }

    #[test]
    fn utilities_and_logits() {
        let q = [0.0, 0.0];
        let cands: Vec<&[f64]> = vec![&[0.0, 0.0], &[0.3, 0.4], &[0.25, 0.25]];
        let u2 = utility_scores(&q, &cands, Norm::L2).unwrap();
        assert_eq!(u2[0], 0.0);
        assert!((u2[1] + 0.5).abs() < 1e-15);
        let u1 = utility_scores(&q, &cands, Norm::L1).unwrap();
        assert!((u1[2] + 0.5).abs() < 1e-15);
        assert!(utility_scores(&q, &[&[0.0][..]], Norm::L2).is_err());

        assert_eq!(logits(&[-0.5], 1.0, 2.0), [-0.125]);
        assert_eq!(logits(&[-0.5, -1.5], 0.0, 2.0), [0.0, 0.0]);
    }

    #[test]
    fn top_m_ties_go_low() {
        assert_eq!(top_m(&[0.1, 0.5, 0.5, 0.2], 1).unwrap(), [1]);
        assert_eq!(top_m(&[0.0, 0.0, 0.0], 2).unwrap(), [0, 1]);
        assert!(top_m(&[0.0], 2).is_err());
    }

    #[test]
    fn gumbel_exhaustive_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(gumbel_top_m(&[0.3, -1.0, 2.0], 3, &mut rng).unwrap(), [0, 1, 2]);
        assert!(gumbel_top_m(&[0.3], 2, &mut rng).is_err());
    }

    #[test]
    fn gumbel_uniform_when_logits_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[gumbel_top_m(&[0.0; 4], 1, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn exact_two_candidate_probability() {
        let dist = subset_distribution(&[0.0, -2.0], 1, 2.0, 2.0, SamplerMode::ExactEm).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((dist[&vec![0]] - expected).abs() < 1e-12);
        assert!((expected - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn full_subset_is_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            exact_em_sample(&[-0.1, -1.0], 2, 1.0, 2.0, &mut rng).unwrap(),
            [0, 1]
        );
        let dist = subset_distribution(&[-0.1, -1.0], 2, 1.0, 2.0, SamplerMode::Gumbel).unwrap();
        assert!((dist[&vec![0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let u = vec![0.0; 40];
        assert!(matches!(
            ExactEmSampler::new(&u, 10, 1.0, 2.0),
            Err(Error::EnumerationCap { .. })
        ));
        assert!(matches!(
            subset_distribution(&u[..12], 6, 1.0, 2.0, SamplerMode::Gumbel),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn modes_agree_for_single_draw() {
        let u = [0.0, -0.3, -1.2, -2.0, -0.7];
        let a = subset_distribution(&u, 1, 3.0, 2.0, SamplerMode::ExactEm).unwrap();
        let b = subset_distribution(&u, 1, 3.0, 2.0, SamplerMode::Gumbel).unwrap();
        for (s, p) in &a {
            assert!((p - b[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_utilities_are_uniform() {
        let u = [-0.4; 5];
        for mode in [SamplerMode::ExactEm, SamplerMode::Gumbel] {
            let d = subset_distribution(&u, 2, 2.0, 2.0, mode).unwrap();
            assert_eq!(d.len(), 10);
            assert!(d.values().all(|p| (p - 0.1).abs() < 1e-12));
        }
    }

    #[test]
    fn ratio_audit_edge_cases() {
        let u = [0.0, -0.5, -1.0, -1.5];
        for mode in [SamplerMode::ExactEm, SamplerMode::Gumbel] {
            assert_eq!(
                privacy_ratio_audit(&u, (2, -1.0), 2, 1.0, 2.0, mode).unwrap(),
                0.0
            );
            assert_eq!(
                privacy_ratio_audit(&u, (0, -2.0), 2, 0.0, 2.0, mode).unwrap(),
                0.0
            );
        }
        let r = privacy_ratio_audit(&u, (0, -2.0), 2, 1.0, 2.0, SamplerMode::ExactEm).unwrap();
        assert!(r > 0.0 && r <= 1.0 + 1e-9);
    }

    #[test]
    fn tail_audit_edge_cases() {
        let u = [0.0, -0.2, -0.9, -1.4, -2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = utility_tail_audit(&u, 2, f64::INFINITY, 2.0, 0.5, 500, &mut rng).unwrap();
        assert_eq!(a.frequency, 0.0);
        let a = utility_tail_audit(&u, 2, 1.0, 2.0, 3.0, 500, &mut rng).unwrap();
        assert!(a.threshold < -4.0);
        assert_eq!(a.frequency, 0.0);
    }

    #[test]
    fn defend_averages_neighbours() {
        let (model, ds) = toy();
        let index = CandidateIndex::build(&model, &ds).unwrap();
        assert_eq!(index.bucket(0), [0, 1, 2]);
        assert_eq!(index.bucket(1), [3]);

        let mut cfg = DefenseConfig::new(2, f64::INFINITY, 0);
        let mut rng = query_rng(0, 0);
        let out = defend(&[0.05], &model, &index, &cfg, &mut rng).unwrap();
        assert_eq!(out.selection.indices, [0, 1]);
        assert!((out.smoothed.get(0) - 0.7).abs() < 1e-12);
        assert_eq!(out.fallback, None);

        cfg.m = 1;
        let out = defend(&[0.45], &model, &index, &cfg, &mut rng).unwrap();
        assert_eq!(out.smoothed, *index.vector(2));

        cfg.m = 3;
        let out = defend(&[0.95], &model, &index, &cfg, &mut rng).unwrap();
        assert_eq!(out.fallback, Some(Fallback::PartialBucket));
        assert_eq!(out.smoothed.probs(), [0.3, 0.7]);
    }

    #[test]
    fn empty_bucket_returns_original() {
        let model = Table(vec![(0.0, vec![0.9, 0.1]), (1.0, vec![0.2, 0.8])]);
        let ds = Dataset::new(vec![vec![0.0]], vec![0], 2).unwrap();
        let index = CandidateIndex::build(&model, &ds).unwrap();
        let cfg = DefenseConfig::new(3, 1.0, 0);
        let out = defend(&[1.0], &model, &index, &cfg, &mut query_rng(0, 0)).unwrap();
        assert_eq!(out.fallback, Some(Fallback::EmptyBucket));
        assert_eq!(out.smoothed, out.original);
    }

    #[test]
    fn config_serde_handles_infinity() {
        let cfg = DefenseConfig::new(5, f64::INFINITY, 3);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"inf\""));
        let back: DefenseConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(DefenseConfig::new(0, 1.0, 0).validate().is_err());
        assert!(DefenseConfig::new(1, -1.0, 0).validate().is_err());
    }

    #[test]
    fn query_streams_differ() {
        let a: f64 = query_rng(5, 0).gen();
        let b: f64 = query_rng(5, 1).gen();
        let c: f64 = query_rng(5, 0).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
