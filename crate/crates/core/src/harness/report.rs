use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use walkdir::WalkDir;

use super::write_file;
use crate::metrics::{correlation_table, pearson, CorrelationTable, DistortionReport, ExperimentCell};

/// Marker for grid entries with no completed cell.
pub const ABSENT: &str = "NA";

const TABLE_FILES: [&str; 2] = ["shadow_attack.csv", "metric_attack.csv"];

#[derive(Debug, Deserialize)]
struct Row {
    dataset: String,
    model: String,
    attack: String,
    acc_no_def: f64,
    acc_def: f64,
    pcd: f64,
    cvd: f64,
    label_loss_rate: f64,
    fallback_rate: f64,
}

/// Heatmap grid: rows are datasets, columns are models.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl Grid {
    fn build(cells: &[&ExperimentCell], value: impl Fn(&ExperimentCell) -> f64) -> Self {
        let datasets: Vec<String> = cells
            .iter()
            .map(|c| c.dataset.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let models: Vec<String> = cells
            .iter()
            .map(|c| c.model.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let values = datasets
            .iter()
            .map(|d| {
                models
                    .iter()
                    .map(|m| {
                        cells
                            .iter()
                            .find(|c| &c.dataset == d && &c.model == m)
                            .map(|c| value(c))
                    })
                    .collect()
            })
            .collect();
        Self {
            datasets,
            models,
            values,
        }
    }

    pub fn get(&self, dataset: &str, model: &str) -> Option<f64> {
        let r = self.datasets.iter().position(|d| d == dataset)?;
        let c = self.models.iter().position(|m| m == model)?;
        self.values[r][c]
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["dataset".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (d, row) in self.datasets.iter().zip(&self.values) {
            let mut record = vec![d.clone()];
            record.extend(
                row.iter()
                    .map(|v| v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.6}"))),
            );
            w.write_record(&record)?;
        }
        w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))
    }

    fn render(&self, title: &str) -> String {
        let mut s = format!("{title}\n");
        let width = self.datasets.iter().map(String::len).max().unwrap_or(0).max(7);
        let _ = write!(s, "{:width$}", "dataset");
        for m in &self.models {
            let _ = write!(s, "  {m:>14}");
        }
        s.push('\n');
        for (d, row) in self.datasets.iter().zip(&self.values) {
            let _ = write!(s, "{d:width$}");
            for v in row {
                match v {
                    Some(x) => {
                        let _ = write!(s, "  {x:>14.4}");
                    }
                    None => {
                        let _ = write!(s, "  {ABSENT:>14}");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub cells: Vec<ExperimentCell>,
    /// Attack name to accuracy-drop grid.
    pub drop: BTreeMap<String, Grid>,
    pub cvd: Grid,
    pub correlation: CorrelationTable,
    /// Pearson r between drop and CVD within each attack.
    pub per_attack_pearson: BTreeMap<String, Option<f64>>,
    pub text: String,
}

/// Loads every result table under `dir`; later files win on duplicate cells.
pub fn load_cells(dir: &Path) -> Result<Vec<ExperimentCell>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("reading {}", dir.display()))?;
        if entry.file_type().is_file()
            && entry
                .file_name()
                .to_str()
                .is_some_and(|n| TABLE_FILES.contains(&n))
        {
            files.push(entry.into_path());
        }
    }
    let mut cells: BTreeMap<(String, String, String), ExperimentCell> = BTreeMap::new();
    for file in &files {
        let mut reader =
            csv::Reader::from_path(file).with_context(|| format!("opening {}", file.display()))?;
        for row in reader.deserialize::<Row>() {
            let r = row.with_context(|| format!("parsing {}", file.display()))?;
            cells.insert(
                (r.dataset.clone(), r.model.clone(), r.attack.clone()),
                ExperimentCell {
                    dataset: r.dataset,
                    model: r.model,
                    attack: r.attack,
                    acc_no_def: r.acc_no_def,
                    acc_def: r.acc_def,
                    distortion: DistortionReport {
                        pcd: r.pcd,
                        cvd: r.cvd,
                        label_loss_rate: r.label_loss_rate,
                        n_queries: 0,
                        fallback_rate: r.fallback_rate,
                    },
                    seed: 0,
                },
            );
        }
    }
    if cells.is_empty() {
        bail!("no completed result cells under {}", dir.display());
    }
    Ok(cells.into_values().collect())
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

pub fn build_report(cells: Vec<ExperimentCell>) -> Result<Report> {
    let attacks: BTreeSet<String> = cells.iter().map(|c| c.attack.clone()).collect();
    let mut drop = BTreeMap::new();
    let mut per_attack_pearson = BTreeMap::new();
    for a in &attacks {
        let mine: Vec<&ExperimentCell> = cells.iter().filter(|c| &c.attack == a).collect();
        drop.insert(a.clone(), Grid::build(&mine, ExperimentCell::accuracy_drop));
        let drops: Vec<f64> = mine.iter().map(|c| c.accuracy_drop()).collect();
        let cvds: Vec<f64> = mine.iter().map(|c| c.distortion.cvd).collect();
        per_attack_pearson.insert(a.clone(), pearson(&drops, &cvds));
    }
    let all: Vec<&ExperimentCell> = cells.iter().collect();
    let cvd = Grid::build(&all, |c| c.distortion.cvd);
    let correlation = correlation_table(&cells)?;

    let mut text = String::new();
    for (a, grid) in &drop {
        text += &grid.render(&format!("Attack accuracy drop ({a})"));
        text.push('\n');
    }
    text += &cvd.render("Confidence vector difference (CVD)");
    text.push('\n');
    let _ = writeln!(
        text,
        "Pearson r(drop, CVD), all cells: {}",
        fmt_r(correlation.drop_cvd_pearson)
    );
    for (a, r) in &per_attack_pearson {
        let _ = writeln!(text, "Pearson r(drop, CVD), {a}: {}", fmt_r(*r));
    }
    Ok(Report {
        cells,
        drop,
        cvd,
        correlation,
        per_attack_pearson,
        text,
    })
}

/// Aggregates result tables under `dir` and writes the heatmap grids,
/// correlation table and plain-text summary into `out` (default `dir`).
pub fn report(dir: &Path, out: Option<&Path>) -> Result<Report> {
    let rep = build_report(load_cells(dir)?)?;
    let out = out.unwrap_or(dir);
    std::fs::create_dir_all(out)?;
    for (a, grid) in &rep.drop {
        write_file(&out.join(format!("heatmap_drop_{a}.csv")), &grid.to_csv()?)?;
    }
    write_file(&out.join("heatmap_cvd.csv"), &rep.cvd.to_csv()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "dataset", "attack", "accuracy_drop", "cvd", "pcd"])?;
    for r in &rep.correlation.rows {
        w.write_record([
            r.model.clone(),
            r.dataset.clone(),
            r.attack.clone(),
            format!("{:.6}", r.accuracy_drop),
            format!("{:.6}", r.cvd),
            format!("{:.6}", r.pcd),
        ])?;
    }
    write_file(
        &out.join("correlation.csv"),
        &w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?,
    )?;
    let summary = serde_json::json!({
        "drop_cvd_pearson": rep.correlation.drop_cvd_pearson,
        "per_attack": rep.per_attack_pearson,
        "cells": rep.cells.len(),
    });
    write_file(
        &out.join("correlation.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    write_file(&out.join("summary.txt"), rep.text.as_bytes())?;
    Ok(rep)
}
