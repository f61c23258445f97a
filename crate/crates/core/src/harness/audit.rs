use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{derive_seed, AuditConfig};
use super::{sha256_hex, write_file};
use crate::defense::{
    gumbel_top_m, logits, privacy_ratio_audit, subset_distribution, utility_tail_audit, SamplerMode,
};

/// Tolerance on the exact-mechanism privacy ratio.
pub const RATIO_SLACK: f64 = 1e-9;

/// One adjacent-pair privacy check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioRecord {
    pub instance: usize,
    pub mode: SamplerMode,
    pub epsilon: f64,
    pub m: usize,
    pub candidates: usize,
    pub max_ratio: f64,
    pub bound: f64,
    /// `None` for the gumbel diagnostic.
    pub pass: Option<bool>,
}

/// Empirical gumbel set frequencies against the Plackett-Luce marginal.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceRecord {
    pub instance: usize,
    pub epsilon: f64,
    pub m: usize,
    pub candidates: usize,
    pub draws: usize,
    pub total_variation: f64,
    /// Largest gap between the gumbel marginal and the exact mechanism.
    pub exact_em_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailRecord {
    pub instance: usize,
    pub epsilon: f64,
    pub m: usize,
    pub candidates: usize,
    pub t: f64,
    pub trials: usize,
    pub frequency: f64,
    pub bound: f64,
    /// `e^{-t}` plus three binomial standard deviations.
    pub allowed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub seed: u64,
    pub ratio: Vec<RatioRecord>,
    pub equivalence: Vec<EquivalenceRecord>,
    pub tail: Vec<TailRecord>,
    pub pass: bool,
}

impl AuditReport {
    pub fn failures(&self) -> usize {
        self.ratio.iter().filter(|r| r.pass == Some(false)).count()
            + self.equivalence.iter().filter(|r| !r.pass).count()
            + self.tail.iter().filter(|r| !r.pass).count()
    }

    pub fn max_gumbel_ratio(&self, epsilon: f64) -> Option<f64> {
        self.ratio
            .iter()
            .filter(|r| r.mode == SamplerMode::Gumbel && r.epsilon == epsilon)
            .map(|r| r.max_ratio)
            .reduce(f64::max)
    }
}

struct Instance {
    utilities: Vec<f64>,
    m: usize,
}

fn random_instance(cfg: &AuditConfig, rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(cfg.candidates.0..=cfg.candidates.1);
    let m = rng.gen_range(cfg.m.0..=cfg.m.1.min(n));
    Instance {
        utilities: (0..n).map(|_| -rng.gen::<f64>() * 2.0).collect(),
        m,
    }
}

fn instance_rng(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Binomial allowance for a Monte-Carlo estimate of a probability `p`.
pub fn tail_allowance(bound: f64, trials: usize) -> f64 {
    bound + 3.0 * (bound * (1.0 - bound) / trials as f64).sqrt()
}

fn ratio_records(cfg: &AuditConfig) -> Result<Vec<RatioRecord>> {
    let jobs: Vec<(usize, f64)> = cfg
        .ratio_epsilons
        .iter()
        .flat_map(|&eps| (0..cfg.ratio_instances).map(move |i| (i, eps)))
        .collect();
    let nested = jobs
        .par_iter()
        .map(|&(i, eps)| -> Result<Vec<RatioRecord>> {
            let mut rng = instance_rng(cfg.seed, &format!("ratio/{eps}/{i}"));
            let inst = random_instance(cfg, &mut rng);
            let k = rng.gen_range(0..inst.utilities.len());
            let substitute = -rng.gen::<f64>() * 2.0;
            [SamplerMode::ExactEm, SamplerMode::Gumbel]
                .into_iter()
                .map(|mode| {
                    let max_ratio = privacy_ratio_audit(
                        &inst.utilities,
                        (k, substitute),
                        inst.m,
                        eps,
                        cfg.delta_u,
                        mode,
                    )?;
                    Ok(RatioRecord {
                        instance: i,
                        mode,
                        epsilon: eps,
                        m: inst.m,
                        candidates: inst.utilities.len(),
                        max_ratio,
                        bound: eps,
                        pass: (mode == SamplerMode::ExactEm).then_some(max_ratio <= eps + RATIO_SLACK),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn equivalence_records(cfg: &AuditConfig) -> Result<Vec<EquivalenceRecord>> {
    (0..cfg.equivalence_instances)
        .into_par_iter()
        .map(|i| {
            let eps = cfg.equivalence_epsilons[i % cfg.equivalence_epsilons.len()];
            let mut rng = instance_rng(cfg.seed, &format!("equivalence/{i}"));
            let inst = random_instance(cfg, &mut rng);
            let oracle = subset_distribution(&inst.utilities, inst.m, eps, cfg.delta_u, SamplerMode::Gumbel)?;
            let exact = subset_distribution(&inst.utilities, inst.m, eps, cfg.delta_u, SamplerMode::ExactEm)?;
            let phi = logits(&inst.utilities, eps, cfg.delta_u);
            let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
            for _ in 0..cfg.equivalence_draws {
                *counts.entry(gumbel_top_m(&phi, inst.m, &mut rng)?).or_default() += 1;
            }
            let draws = cfg.equivalence_draws as f64;
            let total_variation = 0.5
                * oracle
                    .iter()
                    .map(|(s, p)| (counts.get(s).copied().unwrap_or(0) as f64 / draws - p).abs())
                    .sum::<f64>();
            let exact_em_gap = oracle
                .iter()
                .map(|(s, p)| (p - exact[s]).abs())
                .fold(0.0, f64::max);
            Ok(EquivalenceRecord {
                instance: i,
                epsilon: eps,
                m: inst.m,
                candidates: inst.utilities.len(),
                draws: cfg.equivalence_draws,
                total_variation,
                exact_em_gap,
                tolerance: cfg.tv_tolerance,
                pass: total_variation <= cfg.tv_tolerance,
            })
        })
        .collect()
}

fn tail_records(cfg: &AuditConfig) -> Result<Vec<TailRecord>> {
    let mut jobs = Vec::new();
    for &eps in &cfg.tail_epsilons {
        for i in 0..cfg.tail_instances {
            for &t in &cfg.tail_t {
                jobs.push((i, eps, t));
            }
        }
    }
    jobs.par_iter()
        .map(|&(i, eps, t)| {
            // The instance depends on (eps, i) only, so every t audits the same utilities.
            let mut rng = instance_rng(cfg.seed, &format!("tail/{eps}/{i}"));
            let inst = random_instance(cfg, &mut rng);
            let mut draws = instance_rng(cfg.seed, &format!("tail/{eps}/{i}/t{t}"));
            let audit = utility_tail_audit(
                &inst.utilities,
                inst.m,
                eps,
                cfg.delta_u,
                t,
                cfg.tail_trials,
                &mut draws,
            )?;
            let allowed = tail_allowance(audit.bound, audit.trials);
            Ok(TailRecord {
                instance: i,
                epsilon: eps,
                m: inst.m,
                candidates: inst.utilities.len(),
                t,
                trials: audit.trials,
                frequency: audit.frequency,
                bound: audit.bound,
                allowed,
                pass: audit.frequency <= allowed,
            })
        })
        .collect()
}

/// Runs the privacy-ratio, sampler-equivalence and utility-tail audits.
pub fn sampler_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    cfg.validate()?;
    let ratio = ratio_records(cfg)?;
    let equivalence = equivalence_records(cfg)?;
    let tail = tail_records(cfg)?;
    let mut report = AuditReport {
        seed: cfg.seed,
        ratio,
        equivalence,
        tail,
        pass: false,
    };
    report.pass = report.failures() == 0;
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct AuditOptions {
    pub seed: Option<u64>,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

/// Runs the audit in a pool of `opts.jobs` threads and writes `audit.json`
/// (plus its hash in `audit_manifest.json`) when an output directory is known.
pub fn run_audit(cfg: &AuditConfig, opts: &AuditOptions) -> Result<(AuditReport, Option<PathBuf>)> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build()?;
    let report = pool.install(|| sampler_audit(&cfg))?;
    let out = opts.out.clone().or_else(|| cfg.out.clone());
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| anyhow!("creating {}: {e}", dir.display()))?;
        let bytes = serde_json::to_vec_pretty(&report)?;
        let manifest = serde_json::json!({
            "software": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
            "config": cfg,
            "artifacts": { "audit.json": sha256_hex(&bytes) },
        });
        write_file(&dir.join("audit.json"), &bytes)?;
        write_file(
            &dir.join("audit_manifest.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
    }
    Ok((report, out))
}
