//! Config-driven experiment orchestration: runs, sampler audits and reports.

mod audit;
mod config;
mod report;
mod run;

use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub use audit::{
    run_audit, sampler_audit, tail_allowance, AuditOptions, AuditReport, EquivalenceRecord, RatioRecord,
    TailRecord, RATIO_SLACK,
};
pub use config::{
    derive_seed, AttackKind, AttackSpec, AuditConfig, DatasetSpec, DefenseSpec, ExperimentConfig, ModelSpec,
    NeighborCount, SplitSpec,
};
pub use report::{build_report, load_cells, report, Grid, Report, ABSENT};
pub use run::{load_dataset, run, run_file, CellFailure, CellRow, RunOptions, RunSummary, CELL_HEADER};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
