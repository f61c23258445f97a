use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::{derive_seed, AttackKind, DatasetSpec, ExperimentConfig, NeighborCount};
use super::{sha256_hex, write_file};
use crate::attacks::{
    collect_shadow_samples, evaluate_attack, AttackQuery, AttackSample, MembershipAttack, MetricAttack,
    ShadowAttack, ShadowEnsembleConfig,
};
use crate::data::{load_csv, normalize, split, synth_blobs, Dataset, SplitPlan};
use crate::defense::{default_m, defend, query_rng, CandidateIndex, DefenseConfig};
use crate::metrics::{distortion_report, DistortionPair, DistortionReport};
use crate::models::{task_accuracy, Model};

pub const CELL_HEADER: [&str; 9] = [
    "dataset",
    "model",
    "attack",
    "acc_no_def",
    "acc_def",
    "pcd",
    "cvd",
    "label_loss_rate",
    "fallback_rate",
];

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the config's master seed.
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    /// Overrides the config's output directory.
    pub out: Option<PathBuf>,
}

/// Aggregated result for one (dataset, model, attack).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellRow {
    pub dataset: String,
    pub model: String,
    pub attack: String,
    pub acc_no_def: f64,
    pub acc_def: f64,
    pub distortion: DistortionReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct CellFailure {
    pub model: String,
    pub repetition: usize,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub cells: Vec<CellRow>,
    pub failures: Vec<CellFailure>,
}

#[derive(Clone, Debug, Serialize)]
struct StageTiming {
    model: String,
    repetition: usize,
    stage: &'static str,
    seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
struct AttackLine {
    dataset: String,
    model: String,
    attack: &'static str,
    repetition: usize,
    defended: bool,
    accuracy: f64,
    n_eval: usize,
    seed: u64,
}

/// Everything one (model, repetition) job produces.
struct JobOutput {
    model_index: usize,
    repetition: usize,
    m: usize,
    train_accuracy: f64,
    test_accuracy: f64,
    distortion: DistortionReport,
    /// `(attack, acc_no_def, acc_def)` in config order.
    accuracies: Vec<(AttackKind, f64, f64)>,
    lines: Vec<AttackLine>,
    timings: Vec<StageTiming>,
}

pub fn load_dataset(cfg: &ExperimentConfig, master: u64) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Csv {
            path,
            label_column,
            categorical,
        } => {
            let raw = load_csv(path, label_column, categorical)
                .with_context(|| format!("loading dataset {}", path.display()))?;
            Ok(normalize(&raw, cfg.p)?.0)
        }
        DatasetSpec::Blobs {
            classes,
            dim,
            per_class,
            spread,
        } => Ok(synth_blobs(
            *classes,
            *dim,
            *per_class,
            *spread,
            derive_seed(master, "dataset"),
            cfg.p,
        )?),
    }
}

fn split_sizes(cfg: &ExperimentConfig, n: usize) -> usize {
    cfg.split.eval_size.unwrap_or_else(|| {
        let (ft, fe, _) = cfg.split.fractions;
        let train = (ft * n as f64 + 1e-9).floor() as usize;
        let test = (fe * n as f64 + 1e-9).floor() as usize;
        (train / 4).min(test).clamp(1, 500)
    })
}

fn plan_for(cfg: &ExperimentConfig, master: u64, n: usize, repetition: usize) -> Result<SplitPlan> {
    let seed = derive_seed(master, &format!("split/rep{repetition}"));
    Ok(split(n, cfg.split.fractions, split_sizes(cfg, n), seed)?)
}

fn seed_path(model: &str, repetition: usize, component: &str) -> String {
    format!("{model}/rep{repetition}/{component}")
}

struct Timer<'a> {
    model: &'a str,
    repetition: usize,
    started: Instant,
    out: Vec<StageTiming>,
}

impl<'a> Timer<'a> {
    fn new(model: &'a str, repetition: usize) -> Self {
        Self {
            model,
            repetition,
            started: Instant::now(),
            out: Vec::new(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        self.out.push(StageTiming {
            model: self.model.to_string(),
            repetition: self.repetition,
            stage,
            seconds: self.started.elapsed().as_secs_f64(),
        });
        self.started = Instant::now();
    }
}

fn run_job(
    cfg: &ExperimentConfig,
    master: u64,
    ds: &Dataset,
    model_index: usize,
    repetition: usize,
) -> Result<JobOutput> {
    let spec = &cfg.models[model_index];
    let label = spec.label();
    let seed = |component: &str| derive_seed(master, &seed_path(&label, repetition, component));
    let mut timer = Timer::new(&label, repetition);

    let plan = plan_for(cfg, master, ds.len(), repetition)?;
    let train = ds.subset(&plan.target_train);
    let test = ds.subset(&plan.target_test);
    let pool = ds.subset(&plan.shadow_pool);
    let model = Model::train(&train, &spec.train_config(seed("target"))).context("training target model")?;
    let train_accuracy = task_accuracy(&model, &train)?;
    let test_accuracy = task_accuracy(&model, &test)?;
    timer.lap("train_target");

    let index = CandidateIndex::build(&model, &train)?;
    let m = match cfg.defense.m {
        NeighborCount::Fixed(m) => m,
        NeighborCount::Auto(_) => default_m(&index),
    };
    let defense_cfg = |seed: u64| DefenseConfig {
        m,
        epsilon: cfg.defense.epsilon,
        p: cfg.defense.p.unwrap_or(cfg.p),
        delta_u: cfg.defense.delta_u,
        sampler: cfg.defense.sampler,
        seed,
    };
    let target_defense = defense_cfg(seed("defense"));
    target_defense.validate()?;

    // Plan indices address the full dataset; ordinals number members first.
    let n_eval = plan.eval_members.len();
    let eval_rows: Vec<usize> = plan
        .eval_members
        .iter()
        .chain(&plan.eval_nonmembers)
        .copied()
        .collect();
    let outputs = eval_rows
        .par_iter()
        .enumerate()
        .map(|(ordinal, &row)| {
            let mut rng = query_rng(target_defense.seed, ordinal as u64);
            defend(ds.feature(row), &model, &index, &target_defense, &mut rng)
        })
        .collect::<crate::error::Result<Vec<_>>>()?;
    let pairs: Vec<DistortionPair> = outputs
        .iter()
        .map(|o| DistortionPair {
            original: o.original.clone(),
            smoothed: o.smoothed.clone(),
            predicted_label: o.predicted_label,
            fallback: o.fallback.is_some(),
        })
        .collect();
    let distortion = distortion_report(&pairs)?;
    let queries = |defended: bool| -> (Vec<AttackQuery>, Vec<AttackQuery>) {
        let all: Vec<AttackQuery> = eval_rows
            .iter()
            .zip(&outputs)
            .map(|(&row, o)| AttackQuery {
                confidence: if defended {
                    o.smoothed.clone()
                } else {
                    o.original.clone()
                },
                true_label: ds.label(row),
            })
            .collect();
        let nonmembers = all[n_eval..].to_vec();
        let mut members = all;
        members.truncate(n_eval);
        (members, nonmembers)
    };
    let (plain_members, plain_nonmembers) = queries(false);
    let (def_members, def_nonmembers) = queries(true);
    timer.lap("defend_eval");

    let mut shadow_cfg =
        ShadowEnsembleConfig::new(spec.train_config(seed("shadow_models")), seed("shadow_attack"));
    shadow_cfg.num_shadow_models = cfg.attacks.num_shadow_models;
    shadow_cfg.per_class_models = cfg.attacks.per_class_models;
    if let Some(lr) = cfg.attacks.attack_learning_rate {
        shadow_cfg.attack_learning_rate = lr;
    }
    if let Some(epochs) = cfg.attacks.attack_epochs {
        shadow_cfg.attack_epochs = epochs;
    }
    let plain_samples = collect_shadow_samples(&pool, &shadow_cfg, None).context("shadow data")?;
    timer.lap("shadow_plain");
    let defended_samples = if cfg.attacks.adaptive {
        let shadow_defense = defense_cfg(seed("shadow_defense"));
        let samples = collect_shadow_samples(&pool, &shadow_cfg, Some(&shadow_defense))
            .context("defended shadow data")?;
        timer.lap("shadow_defended");
        samples
    } else {
        plain_samples.clone()
    };

    let num_classes = ds.num_classes();
    let fit = |kind: AttackKind, samples: &[AttackSample]| -> Result<Box<dyn MembershipAttack>> {
        Ok(match kind.metric() {
            None => Box::new(ShadowAttack::fit(samples, num_classes, &shadow_cfg)?),
            Some(metric) => Box::new(MetricAttack::fit(
                samples,
                metric,
                num_classes,
                cfg.attacks.per_class_thresholds,
            )?),
        })
    };
    let mut accuracies = Vec::new();
    let mut lines = Vec::new();
    for &kind in &cfg.attacks.kinds {
        let plain = fit(kind, &plain_samples)?;
        let defended = fit(kind, &defended_samples)?;
        let acc_no_def = evaluate_attack(plain.as_ref(), &plain_members, &plain_nonmembers)?.accuracy;
        let acc_def = evaluate_attack(defended.as_ref(), &def_members, &def_nonmembers)?.accuracy;
        for (is_defended, accuracy) in [(false, acc_no_def), (true, acc_def)] {
            lines.push(AttackLine {
                dataset: cfg.name.clone(),
                model: label.clone(),
                attack: kind.as_str(),
                repetition,
                defended: is_defended,
                accuracy,
                n_eval: 2 * n_eval,
                seed: shadow_cfg.seed,
            });
        }
        accuracies.push((kind, acc_no_def, acc_def));
    }
    timer.lap("attacks");

    Ok(JobOutput {
        model_index,
        repetition,
        m,
        train_accuracy,
        test_accuracy,
        distortion,
        accuracies,
        lines,
        timings: timer.out,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn mean_distortion(reports: &[&DistortionReport]) -> DistortionReport {
    DistortionReport {
        pcd: mean(reports.iter().map(|r| r.pcd)),
        cvd: mean(reports.iter().map(|r| r.cvd)),
        label_loss_rate: mean(reports.iter().map(|r| r.label_loss_rate)),
        n_queries: reports.iter().map(|r| r.n_queries).sum(),
        fallback_rate: mean(reports.iter().map(|r| r.fallback_rate)),
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn cell_csv(rows: &[&CellRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CELL_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.model.clone(),
            r.attack.clone(),
            fmt(r.acc_no_def),
            fmt(r.acc_def),
            fmt(r.distortion.pcd),
            fmt(r.distortion.cvd),
            fmt(r.distortion.label_loss_rate),
            fmt(r.distortion.fallback_rate),
        ])?;
    }
    w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))
}

/// Trains every configured model, attacks it with and without the defense,
/// and writes the result tables plus `manifest.json` to the output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let master = cfg.seed;
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| anyhow!("out: no output directory in config or --out"))?;
    let started = Instant::now();
    let ds = load_dataset(&cfg, master)?;
    // Surface split problems as a run-level error rather than per-cell failures.
    plan_for(&cfg, master, ds.len(), 0).context("split")?;
    let load_seconds = started.elapsed().as_secs_f64();

    let jobs: Vec<(usize, usize)> = (0..cfg.models.len())
        .flat_map(|i| (0..cfg.repetitions).map(move |r| (i, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build()?;
    let results: Vec<Result<JobOutput>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| run_job(&cfg, master, &ds, i, r))
            .collect()
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (&(i, r), res) in jobs.iter().zip(results) {
        match res {
            Ok(o) => outputs.push(o),
            Err(e) => failures.push(CellFailure {
                model: cfg.models[i].label(),
                repetition: r,
                error: format!("{e:#}"),
            }),
        }
    }

    let mut cells = Vec::new();
    for (i, spec) in cfg.models.iter().enumerate() {
        let label = spec.label();
        if failures.iter().any(|f| f.model == label) {
            continue;
        }
        let mine: Vec<&JobOutput> = outputs.iter().filter(|o| o.model_index == i).collect();
        let distortion = mean_distortion(&mine.iter().map(|o| &o.distortion).collect::<Vec<_>>());
        for (a, &kind) in cfg.attacks.kinds.iter().enumerate() {
            cells.push(CellRow {
                dataset: cfg.name.clone(),
                model: label.clone(),
                attack: kind.as_str().to_string(),
                acc_no_def: mean(mine.iter().map(|o| o.accuracies[a].1)),
                acc_def: mean(mine.iter().map(|o| o.accuracies[a].2)),
                distortion,
            });
        }
    }

    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut artifacts = BTreeMap::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        artifacts.insert(name.to_string(), sha256_hex(&bytes));
        write_file(&out_dir.join(name), &bytes)
    };

    let shadow: Vec<&CellRow> = cells.iter().filter(|c| c.attack == "shadow").collect();
    let metric: Vec<&CellRow> = cells.iter().filter(|c| c.attack != "shadow").collect();
    emit("shadow_attack.csv", cell_csv(&shadow)?)?;
    emit("metric_attack.csv", cell_csv(&metric)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "model",
        "repetition",
        "m",
        "train_accuracy",
        "test_accuracy",
        "pcd",
        "cvd",
        "label_loss_rate",
        "fallback_rate",
        "n_queries",
    ])?;
    for o in &outputs {
        w.write_record([
            cfg.name.clone(),
            cfg.models[o.model_index].label(),
            o.repetition.to_string(),
            o.m.to_string(),
            fmt(o.train_accuracy),
            fmt(o.test_accuracy),
            fmt(o.distortion.pcd),
            fmt(o.distortion.cvd),
            fmt(o.distortion.label_loss_rate),
            fmt(o.distortion.fallback_rate),
            o.distortion.n_queries.to_string(),
        ])?;
    }
    emit(
        "targets.csv",
        w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?,
    )?;

    let mut jsonl = Vec::new();
    for line in outputs.iter().flat_map(|o| &o.lines) {
        serde_json::to_writer(&mut jsonl, line)?;
        jsonl.push(b'\n');
    }
    emit("attack_reports.jsonl", jsonl)?;

    let mut seeds = BTreeMap::new();
    seeds.insert("master".to_string(), master);
    if matches!(cfg.dataset, DatasetSpec::Blobs { .. }) {
        seeds.insert("dataset".to_string(), derive_seed(master, "dataset"));
    }
    for r in 0..cfg.repetitions {
        let path = format!("split/rep{r}");
        seeds.insert(path.clone(), derive_seed(master, &path));
        for spec in &cfg.models {
            for component in [
                "target",
                "defense",
                "shadow_models",
                "shadow_attack",
                "shadow_defense",
            ] {
                let path = seed_path(&spec.label(), r, component);
                seeds.insert(path.clone(), derive_seed(master, &path));
            }
        }
    }
    let mut timings = vec![StageTiming {
        model: String::new(),
        repetition: 0,
        stage: "load_data",
        seconds: load_seconds,
    }];
    timings.extend(outputs.iter().flat_map(|o| o.timings.iter().cloned()));
    let manifest = json!({
        "software": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
        "config": cfg,
        "seeds": seeds,
        "dataset": { "samples": ds.len(), "dim": ds.dim(), "classes": ds.num_classes() },
        "distortion_population": "eval members and non-members; fallback queries excluded from pcd and cvd",
        "artifacts": artifacts,
        "timings": timings,
        "failures": failures,
        "total_seconds": started.elapsed().as_secs_f64(),
    });
    write_file(
        &out_dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;

    Ok(RunSummary {
        out_dir,
        cells,
        failures,
    })
}

/// Reads a config file and runs it.
pub fn run_file(path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    run(&ExperimentConfig::from_file(path)?, opts)
}
