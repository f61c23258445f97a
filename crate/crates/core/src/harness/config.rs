use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::MetricKind;
use crate::data::Norm;
use crate::defense::{epsilon_serde, SamplerMode, DEFAULT_DELTA_U};
use crate::models::{ModelKind, TrainConfig};

/// `seed(component) = first 8 bytes of SHA-256(master_seed_le || path)`.
pub fn derive_seed(master: u64, path: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(path.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Csv {
        /// Relative paths resolve against the config file's directory.
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        categorical: BTreeSet<String>,
    },
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// `(target_train, target_test, shadow_pool)` fractions.
    pub fractions: (f64, f64, f64),
    /// Per side; defaults to `min(500, |target_train| / 4)`.
    #[serde(default)]
    pub eval_size: Option<usize>,
}

/// [`TrainConfig`] minus the seed, which the harness derives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Label in output rows; defaults to the kind.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub trees: Option<usize>,
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default)]
    pub max_features: Option<usize>,
    #[serde(default)]
    pub leaf_alpha: Option<f64>,
}

impl ModelSpec {
    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.kind.as_str().to_string())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.kind, seed);
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = &self.hidden {
            cfg.hidden = v.clone();
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.trees {
            cfg.trees = v;
        }
        cfg.max_depth = self.max_depth;
        cfg.max_features = self.max_features;
        if let Some(v) = self.leaf_alpha {
            cfg.leaf_alpha = v;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NeighborCount {
    Fixed(usize),
    /// `"auto"`: 5 for densely populated label buckets, else 3.
    Auto(String),
}

impl Default for NeighborCount {
    fn default() -> Self {
        NeighborCount::Auto("auto".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    #[serde(default)]
    pub m: NeighborCount,
    #[serde(with = "epsilon_serde", default = "default_epsilon")]
    pub epsilon: f64,
    /// Defaults to the normalization norm.
    #[serde(default)]
    pub p: Option<Norm>,
    #[serde(default = "default_delta_u")]
    pub delta_u: f64,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerMode,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            m: NeighborCount::default(),
            epsilon: default_epsilon(),
            p: None,
            delta_u: default_delta_u(),
            sampler: default_sampler(),
        }
    }
}

fn default_epsilon() -> f64 {
    1.0
}

fn default_delta_u() -> f64 {
    DEFAULT_DELTA_U
}

fn default_sampler() -> SamplerMode {
    SamplerMode::Gumbel
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Shadow,
    Confidence,
    Entropy,
    ModifiedEntropy,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Shadow => "shadow",
            AttackKind::Confidence => "confidence",
            AttackKind::Entropy => "entropy",
            AttackKind::ModifiedEntropy => "modified_entropy",
        }
    }

    pub fn metric(self) -> Option<MetricKind> {
        match self {
            AttackKind::Shadow => None,
            AttackKind::Confidence => Some(MetricKind::Confidence),
            AttackKind::Entropy => Some(MetricKind::Entropy),
            AttackKind::ModifiedEntropy => Some(MetricKind::ModifiedEntropy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default = "all_attacks")]
    pub kinds: Vec<AttackKind>,
    #[serde(default = "default_shadow_models")]
    pub num_shadow_models: usize,
    #[serde(default)]
    pub per_class_models: bool,
    #[serde(default = "yes")]
    pub per_class_thresholds: bool,
    /// Shadow outputs pass through the defense for defended evaluations.
    #[serde(default = "yes")]
    pub adaptive: bool,
    #[serde(default)]
    pub attack_learning_rate: Option<f64>,
    #[serde(default)]
    pub attack_epochs: Option<usize>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kinds: all_attacks(),
            num_shadow_models: default_shadow_models(),
            per_class_models: false,
            per_class_thresholds: true,
            adaptive: true,
            attack_learning_rate: None,
            attack_epochs: None,
        }
    }
}

fn all_attacks() -> Vec<AttackKind> {
    vec![
        AttackKind::Shadow,
        AttackKind::Confidence,
        AttackKind::Entropy,
        AttackKind::ModifiedEntropy,
    ]
}

fn default_shadow_models() -> usize {
    4
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn default_p() -> Norm {
    Norm::L2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset id used in every output row.
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Independent splits per model; reported accuracies and distortions
    /// are means over repetitions.
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Norm order for feature normalization.
    #[serde(default = "default_p")]
    pub p: Norm,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub defense: DefenseSpec,
    #[serde(default)]
    pub attacks: AttackSpec,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        if let DatasetSpec::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        if let Some(out) = &mut cfg.out {
            if out.is_relative() {
                if let Some(dir) = path.parent() {
                    *out = dir.join(&*out);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Semantic checks; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            bail!("name: must not be empty");
        }
        if self.repetitions == 0 {
            bail!("repetitions: must be at least 1");
        }
        if self.models.is_empty() {
            bail!("models: at least one model is required");
        }
        let mut labels = BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            m.train_config(0)
                .validate()
                .with_context(|| format!("models[{i}]"))?;
            if !labels.insert(m.label()) {
                bail!("models[{i}].name: duplicate model label `{}`", m.label());
            }
        }
        let (a, b, c) = self.split.fractions;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-9 {
            bail!("split.fractions: each must lie in [0, 1] and sum to at most 1");
        }
        if self.split.eval_size == Some(0) {
            bail!("split.eval_size: must be positive");
        }
        match &self.dataset {
            DatasetSpec::Csv { label_column, .. } if label_column.is_empty() => {
                bail!("dataset.label_column: must not be empty")
            }
            DatasetSpec::Blobs {
                classes,
                dim,
                per_class,
                spread,
            } => {
                if *classes < 2 || *dim < 1 || *per_class < 1 {
                    bail!("dataset: blobs need classes >= 2, dim >= 1, per_class >= 1");
                }
                if spread.is_nan() || *spread <= 0.0 {
                    bail!("dataset.spread: must be positive");
                }
            }
            _ => {}
        }
        match &self.defense.m {
            NeighborCount::Fixed(0) => bail!("defense.m: must be at least 1"),
            NeighborCount::Auto(s) if s != "auto" => bail!("defense.m: expected an integer or \"auto\""),
            _ => {}
        }
        if self.defense.epsilon.is_nan() || self.defense.epsilon < 0.0 {
            bail!("defense.epsilon: must be >= 0 or \"inf\"");
        }
        if !(self.defense.delta_u > 0.0 && self.defense.delta_u.is_finite()) {
            bail!("defense.delta_u: must be positive");
        }
        if self.attacks.kinds.is_empty() {
            bail!("attacks.kinds: at least one attack is required");
        }
        if self.attacks.num_shadow_models == 0 {
            bail!("attacks.num_shadow_models: must be at least 1");
        }
        Ok(())
    }
}

/// Parameter ranges for the sampler audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Inclusive range of candidate-set sizes.
    #[serde(default = "default_candidates")]
    pub candidates: (usize, usize),
    /// Inclusive range of subset sizes.
    #[serde(default = "default_m_range")]
    pub m: (usize, usize),
    #[serde(default = "default_audit_delta_u")]
    pub delta_u: f64,
    #[serde(default = "default_ratio_epsilons")]
    pub ratio_epsilons: Vec<f64>,
    #[serde(default = "default_ratio_instances")]
    pub ratio_instances: usize,
    #[serde(default = "default_equivalence_instances")]
    pub equivalence_instances: usize,
    #[serde(default = "default_equivalence_draws")]
    pub equivalence_draws: usize,
    #[serde(default = "default_equivalence_epsilons")]
    pub equivalence_epsilons: Vec<f64>,
    #[serde(default = "default_tv_tolerance")]
    pub tv_tolerance: f64,
    #[serde(default = "default_tail_t")]
    pub tail_t: Vec<f64>,
    #[serde(default = "default_tail_epsilons")]
    pub tail_epsilons: Vec<f64>,
    #[serde(default = "default_tail_instances")]
    pub tail_instances: usize,
    #[serde(default = "default_tail_trials")]
    pub tail_trials: usize,
}

fn default_candidates() -> (usize, usize) {
    (2, 6)
}
fn default_m_range() -> (usize, usize) {
    (1, 3)
}
fn default_audit_delta_u() -> f64 {
    DEFAULT_DELTA_U
}
fn default_ratio_epsilons() -> Vec<f64> {
    vec![0.5, 1.0, 4.0]
}
fn default_ratio_instances() -> usize {
    200
}
fn default_equivalence_instances() -> usize {
    50
}
fn default_equivalence_draws() -> usize {
    200_000
}
fn default_equivalence_epsilons() -> Vec<f64> {
    vec![1.0, 4.0, 8.0]
}
fn default_tv_tolerance() -> f64 {
    0.01
}
fn default_tail_t() -> Vec<f64> {
    vec![1.0, 2.0, 3.0]
}
fn default_tail_epsilons() -> Vec<f64> {
    vec![4.0, 16.0, 64.0]
}
fn default_tail_instances() -> usize {
    5
}
fn default_tail_trials() -> usize {
    50_000
}

impl AuditConfig {
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults parse")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        if let Some(out) = &mut cfg.out {
            if out.is_relative() {
                if let Some(dir) = path.parent() {
                    *out = dir.join(&*out);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.candidates;
        if lo < 1 || lo > hi {
            bail!("candidates: expected 1 <= min <= max");
        }
        let (mlo, mhi) = self.m;
        if mlo < 1 || mlo > mhi || mlo > hi {
            bail!("m: expected 1 <= min <= max and min <= candidates.max");
        }
        if self.delta_u.is_nan() || self.delta_u <= 0.0 {
            bail!("delta_u: must be positive");
        }
        for (field, eps) in [
            ("ratio_epsilons", &self.ratio_epsilons),
            ("equivalence_epsilons", &self.equivalence_epsilons),
            ("tail_epsilons", &self.tail_epsilons),
        ] {
            if eps.is_empty() || eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                bail!("{field}: need at least one finite epsilon >= 0");
            }
        }
        if self.tail_epsilons.contains(&0.0) {
            bail!("tail_epsilons: tail bound needs epsilon > 0");
        }
        if self.tail_t.iter().any(|t| t.is_nan() || *t <= 0.0) {
            bail!("tail_t: values must be positive");
        }
        if self.equivalence_draws == 0 || self.tail_trials == 0 {
            bail!("equivalence_draws and tail_trials must be positive");
        }
        Ok(())
    }
}
