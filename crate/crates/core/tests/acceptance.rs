//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{anyhow, bail, ensure, Result};
use rayon::prelude::*;

use nblend::attacks::{entropy_score, modified_entropy_score};
use nblend::data::{split, Dataset};
use nblend::defense::{defend, query_rng, CandidateIndex, DefenseConfig, SamplerMode};
use nblend::harness::{self, AuditConfig, AuditReport, ExperimentConfig};
use nblend::models::{ConfidenceVector, Model};

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn config(name: &str) -> PathBuf {
    manifest_dir().join("configs").join(name)
}

#[derive(Debug, Clone, serde::Deserialize)]
struct Row {
    dataset: String,
    model: String,
    attack: String,
    acc_no_def: f64,
    acc_def: f64,
    pcd: f64,
    cvd: f64,
    label_loss_rate: f64,
}

struct RunPair {
    serial: PathBuf,
    parallel: PathBuf,
}

impl RunPair {
    fn rows(&self) -> Result<Vec<Row>> {
        let mut rows = Vec::new();
        for file in ["shadow_attack.csv", "metric_attack.csv"] {
            let mut reader = csv::Reader::from_path(self.serial.join(file))?;
            for row in reader.deserialize() {
                rows.push(row?);
            }
        }
        Ok(rows)
    }
}

fn find<'a>(rows: &'a [Row], model: &str, attack: &str) -> Result<&'a Row> {
    rows.iter()
        .find(|r| r.model == model && r.attack == attack)
        .ok_or_else(|| anyhow!("no {model}/{attack} cell"))
}

fn cli_run(cfg: &Path, out: &Path, jobs: usize) -> Result<()> {
    let status = Command::new(env!("CARGO_BIN_EXE_nblend"))
        .args([
            "run",
            cfg.to_str().unwrap(),
            "--jobs",
            &jobs.to_string(),
            "--out",
            out.to_str().unwrap(),
        ])
        .stdout(std::process::Stdio::null())
        .status()?;
    ensure!(
        status.success(),
        "nblend run {} exited with {status}",
        cfg.display()
    );
    Ok(())
}

fn run_pair(root: &Path, name: &str) -> Result<RunPair> {
    let pair = RunPair {
        serial: root.join(format!("{name}-jobs1")),
        parallel: root.join(format!("{name}-jobs8")),
    };
    let cfg = config(&format!("{name}.toml"));
    cli_run(&cfg, &pair.serial, 1)?;
    cli_run(&cfg, &pair.parallel, 8)?;
    Ok(pair)
}

fn within(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

// 1. Zero label loss.
fn zero_label_loss(runs: &[&RunPair]) -> Result<String> {
    let mut invocations = 0usize;
    let mut lost = 0usize;
    for name in ["iris.toml", "blobs.toml"] {
        let cfg = ExperimentConfig::from_file(&config(name))?;
        let ds = harness::load_dataset(&cfg, cfg.seed)?;
        let plan = split(ds.len(), cfg.split.fractions, 1, 5)?;
        let train = ds.subset(&plan.target_train);
        for spec in &cfg.models {
            let model = Model::train(&train, &spec.train_config(11))?;
            let index = CandidateIndex::build(&model, &train)?;
            for eps in [0.1, 1.0, 10.0, f64::INFINITY] {
                for m in [1, 3, 5] {
                    for sampler in [SamplerMode::Gumbel, SamplerMode::ExactEm] {
                        let def = DefenseConfig {
                            sampler,
                            ..DefenseConfig::new(m, eps, 3)
                        };
                        let (n, bad) = count_label_loss(&ds, &model, &index, &def)?;
                        invocations += n;
                        lost += bad;
                    }
                }
            }
        }
    }
    for run in runs {
        for row in run.rows()? {
            ensure!(
                row.label_loss_rate == 0.0,
                "{}/{} label loss {}",
                row.dataset,
                row.model,
                row.label_loss_rate
            );
        }
    }
    ensure!(
        lost == 0,
        "{lost} of {invocations} defended queries changed label"
    );
    Ok(format!(
        "{invocations} defended queries plus all harness cells, 0 label changes"
    ))
}

fn count_label_loss(
    ds: &Dataset,
    model: &Model,
    index: &CandidateIndex,
    def: &DefenseConfig,
) -> Result<(usize, usize)> {
    // Skip exact enumeration where the bucket would exceed the cap.
    let outputs: Vec<Option<(usize, usize)>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = query_rng(def.seed, i as u64);
            match defend(ds.feature(i), model, index, def, &mut rng) {
                Ok(o) => Ok(Some((o.original.argmax(), o.smoothed.argmax()))),
                Err(nblend::error::Error::EnumerationCap { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<nblend::error::Result<_>>()?;
    let done: Vec<(usize, usize)> = outputs.into_iter().flatten().collect();
    Ok((done.len(), done.iter().filter(|(a, b)| a != b).count()))
}

fn audit() -> Result<AuditReport> {
    harness::sampler_audit(&AuditConfig::from_file(&config("audit.toml"))?)
}

// 2. Gumbel-top-m against the Plackett-Luce marginal.
fn sampler_equivalence(report: &AuditReport) -> Result<String> {
    let eq = &report.equivalence;
    ensure!(eq.len() == 50, "expected 50 instances, got {}", eq.len());
    ensure!(
        eq.iter()
            .all(|r| r.candidates <= 6 && r.m <= 3 && r.draws == 200_000),
        "instance ranges"
    );
    let worst = eq.iter().map(|r| r.total_variation).fold(0.0, f64::max);
    ensure!(worst <= 0.01, "max total variation {worst:.5} > 0.01");
    Ok(format!("50 instances x 200k draws, max TV {worst:.5} <= 0.01"))
}

// 3. Exact-mechanism privacy ratio.
fn privacy_ratio(report: &AuditReport) -> Result<String> {
    let mut parts = Vec::new();
    for eps in [0.5, 1.0, 4.0] {
        let exact: Vec<_> = report
            .ratio
            .iter()
            .filter(|r| r.mode == SamplerMode::ExactEm && r.epsilon == eps)
            .collect();
        ensure!(exact.len() == 200, "eps {eps}: {} instances", exact.len());
        let worst = exact.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
        ensure!(worst <= eps + 1e-9, "eps {eps}: max ratio {worst} exceeds bound");
        let gumbel = report.max_gumbel_ratio(eps).unwrap_or(f64::NAN);
        parts.push(format!(
            "eps {eps}: max {worst:.4} (gumbel diagnostic {gumbel:.4})"
        ));
    }
    Ok(parts.join("; "))
}

// 4. Utility tail bound.
fn tail_bound(report: &AuditReport) -> Result<String> {
    ensure!(!report.tail.is_empty(), "no tail records");
    for t in [1.0, 2.0, 3.0] {
        ensure!(report.tail.iter().any(|r| r.t == t), "no records for t = {t}");
    }
    for r in &report.tail {
        ensure!(r.trials == 50_000, "trials {}", r.trials);
        let allowed = (-r.t).exp() + 3.0 * ((-r.t).exp() * (1.0 - (-r.t).exp()) / 50_000.0).sqrt();
        ensure!(
            r.frequency <= allowed,
            "t {} eps {}: frequency {} > {allowed}",
            r.t,
            r.epsilon,
            r.frequency
        );
    }
    let worst = report
        .tail
        .iter()
        .map(|r| r.frequency - r.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "{} records, max (frequency - e^-t) {worst:.5}",
        report.tail.len()
    ))
}

// 5. Iris reproduction and blob surrogate.
fn iris_and_blobs(iris: &RunPair, blobs: &RunPair) -> Result<String> {
    let rows = iris.rows()?;
    let shadow = find(&rows, "tree_ensemble", "shadow")?;
    let entropy = find(&rows, "tree_ensemble", "entropy")?;
    let b = blobs.rows()?;
    let surrogate = find(&b, "tree_ensemble", "shadow")?;
    let detail = format!(
        "iris shadow {:.4} -> {:.4}, entropy {:.4} -> {:.4}; blobs shadow {:.4} -> {:.4}",
        shadow.acc_no_def,
        shadow.acc_def,
        entropy.acc_no_def,
        entropy.acc_def,
        surrogate.acc_no_def,
        surrogate.acc_def
    );
    let mut failed = Vec::new();
    if !within(shadow.acc_no_def, 0.64, 0.80) {
        failed.push("iris shadow undefended outside [0.64, 0.80]");
    }
    if !within(shadow.acc_def, 0.48, 0.62) {
        failed.push("iris shadow defended outside [0.48, 0.62]");
    }
    if !within(entropy.acc_no_def, 0.72 - 0.08, 0.72 + 0.08) {
        failed.push("iris entropy undefended outside 0.72 +/- 0.08");
    }
    if !within(entropy.acc_def, 0.56 - 0.08, 0.56 + 0.08) {
        failed.push("iris entropy defended outside 0.56 +/- 0.08");
    }
    if surrogate.acc_no_def < 0.85 {
        failed.push("blobs undefended < 0.85");
    }
    if surrogate.acc_def > 0.57 {
        failed.push("blobs defended > 0.57");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        bail!("{detail}; {}", failed.join(", "))
    }
}

// 6. Distortion sanity.
fn distortion(iris: &RunPair, blobs: &RunPair) -> Result<String> {
    let rows = iris.rows()?;
    let rf = find(&rows, "tree_ensemble", "shadow")?;
    ensure!(
        (rf.pcd - 0.061).abs() <= 0.05,
        "iris pcd {:.4} not within 0.061 +/- 0.05",
        rf.pcd
    );
    ensure!(
        (rf.cvd - 0.083).abs() <= 0.06,
        "iris cvd {:.4} not within 0.083 +/- 0.06",
        rf.cvd
    );
    let mut pattern = Vec::new();
    for run in [iris, blobs] {
        let rows = run.rows()?;
        let tree = find(&rows, "tree_ensemble", "shadow")?.cvd;
        let mut seen = false;
        for lr in rows.iter().filter(|r| r.model == "logreg") {
            seen = true;
            ensure!(
                lr.cvd < tree,
                "{}: logreg cvd {:.4} >= tree cvd {tree:.4}",
                lr.dataset,
                lr.cvd
            );
        }
        ensure!(seen, "no logreg cell for {}", rows[0].dataset);
        let lr = find(&rows, "logreg", "shadow")?.cvd;
        pattern.push(format!("{} logreg {lr:.4} < tree {tree:.4}", rows[0].dataset));
    }
    Ok(format!(
        "iris tree pcd {:.4}, cvd {:.4}; {}",
        rf.pcd,
        rf.cvd,
        pattern.join(", ")
    ))
}

// 7. Metric-attack unit oracles.
fn metric_oracles() -> Result<String> {
    for c in [2usize, 3, 10] {
        let h = entropy_score(&ConfidenceVector::uniform(c));
        ensure!(
            (h - (c as f64).ln()).abs() <= 1e-12,
            "entropy of uniform {c}-vector {h}"
        );
    }
    let one_hot = modified_entropy_score(&ConfidenceVector::one_hot(3, 1), 1)?;
    ensure!(one_hot <= 1e-9, "mentr of one-hot {one_hot}");
    let v = ConfidenceVector::new(vec![0.8, 0.2])?;
    let mentr = modified_entropy_score(&v, 0)?;
    ensure!((mentr - 0.08926).abs() <= 1e-4, "mentr(0.8, 0.2) = {mentr}");
    Ok(format!(
        "ln C exact, one-hot mentr {one_hot:e}, mentr(0.8, 0.2) = {mentr:.5}"
    ))
}

// 8. Determinism across --jobs.
fn determinism(runs: &[(&str, &RunPair)]) -> Result<String> {
    let mut compared = BTreeMap::new();
    for (name, run) in runs {
        for file in ["shadow_attack.csv", "metric_attack.csv", "targets.csv"] {
            let a = std::fs::read(run.serial.join(file))?;
            let b = std::fs::read(run.parallel.join(file))?;
            ensure!(a == b, "{name}/{file} differs between --jobs 1 and --jobs 8");
            compared.insert(format!("{name}/{file}"), a.len());
        }
    }
    Ok(format!(
        "{} CSV files byte-identical at --jobs 1 and --jobs 8",
        compared.len()
    ))
}

// 9. MLP gradient check.
fn gradient_check() -> Result<String> {
    let err = common::toy_gradient_error(&[2, 4, 3, 2], 5);
    ensure!(err <= 1e-4, "max relative error {err:e}");
    Ok(format!("max relative error {err:.2e} on 3-sample, 2-class toy"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let started = std::time::Instant::now();
    let iris = run_pair(tmp.path(), "iris");
    let blobs = run_pair(tmp.path(), "blobs");
    let audit = audit();

    let with_runs = |f: &dyn Fn(&RunPair, &RunPair) -> Result<String>| match (&iris, &blobs) {
        (Ok(i), Ok(b)) => f(i, b),
        (Err(e), _) | (_, Err(e)) => Err(anyhow!("run failed: {e:#}")),
    };
    let with_audit = |f: &dyn Fn(&AuditReport) -> Result<String>| match &audit {
        Ok(a) => f(a),
        Err(e) => Err(anyhow!("audit failed: {e:#}")),
    };

    let results: Vec<(&str, Result<String>)> = vec![
        ("zero label loss", with_runs(&|i, b| zero_label_loss(&[i, b]))),
        ("sampler equivalence", with_audit(&sampler_equivalence)),
        ("privacy ratio bound", with_audit(&privacy_ratio)),
        ("utility tail bound", with_audit(&tail_bound)),
        ("iris reproduction and blob surrogate", with_runs(&iris_and_blobs)),
        ("distortion sanity", with_runs(&distortion)),
        ("metric-attack oracles", metric_oracles()),
        (
            "determinism across --jobs",
            with_runs(&|i, b| determinism(&[("iris", i), ("blobs", b)])),
        ),
        ("mlp gradient check", gradient_check()),
    ];

    let mut failures = 0;
    for (i, (name, res)) in results.iter().enumerate() {
        match res {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(e) => {
                failures += 1;
                println!("FAIL criterion {}: {name}: {e:#}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed in {:.1}s",
        results.len() - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
