use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nblend::harness::{self, AuditConfig, AuditOptions, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(
    name = "nblend",
    version,
    about = "Neighborhood Blending membership-inference defense lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train targets, attack them with and without the defense, write result tables.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check sampler privacy ratios, Gumbel equivalence and utility tails.
    SamplerAudit {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate result tables under a directory into heatmap grids.
    Report {
        dir: PathBuf,
        /// Where to write the grids (defaults to the input directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Run {
            config,
            seed,
            jobs,
            out,
        } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let summary = harness::run(&cfg, &RunOptions { seed, jobs, out })?;
            for c in &summary.cells {
                println!(
                    "{:<10} {:<14} {:<17} acc {:.4} -> {:.4}  pcd {:.4}  cvd {:.4}  label loss {:.4}",
                    c.dataset,
                    c.model,
                    c.attack,
                    c.acc_no_def,
                    c.acc_def,
                    c.distortion.pcd,
                    c.distortion.cvd,
                    c.distortion.label_loss_rate
                );
            }
            for f in &summary.failures {
                eprintln!(
                    "cell failed: {} (repetition {}): {}",
                    f.model, f.repetition, f.error
                );
            }
            println!("results written to {}", summary.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::SamplerAudit {
            config,
            seed,
            jobs,
            out,
        } => {
            let cfg = AuditConfig::from_file(&config)?;
            let (report, written) = harness::run_audit(&cfg, &AuditOptions { seed, jobs, out })?;
            if written.is_none() {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            let worst_tv = report
                .equivalence
                .iter()
                .map(|r| r.total_variation)
                .fold(0.0, f64::max);
            println!(
                "ratio checks: {}, equivalence checks: {} (max TV {worst_tv:.5}), tail checks: {}, failures: {}",
                report.ratio.iter().filter(|r| r.pass.is_some()).count(),
                report.equivalence.len(),
                report.tail.len(),
                report.failures()
            );
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Report { dir, out } => {
            let rep = harness::report(&dir, out.as_deref())?;
            print!("{}", rep.text);
            Ok(ExitCode::SUCCESS)
        }
    }
}
