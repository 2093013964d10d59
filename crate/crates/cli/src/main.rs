use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use engmf_core::harness::{self, ExperimentConfig};

const SEED_OFFSET_VAR: &str = "ENGMF_LAB_SEED_OFFSET";

#[derive(Parser)]
#[command(name = "engmf-lab", version, about = "Twin experiments for ensemble Gaussian mixture filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run single cells and print their RMSE.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Filter name; defaults to every filter in the config.
        #[arg(long)]
        method: Option<String>,
        /// Ensemble size; defaults to every size in the config.
        #[arg(long)]
        particles: Option<usize>,
        /// Seed; defaults to every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the full sweep and write CSV files.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print the aggregate table of a finished sweep.
    Table {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Ok(raw) = std::env::var(SEED_OFFSET_VAR) {
        let offset: u64 = raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_OFFSET_VAR} must be a non-negative integer, got {raw:?}"))?;
        cfg.offset_seeds(offset);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            method,
            particles,
            seed,
        } => {
            let cfg = load(&config)?;
            let methods: Vec<String> = match method {
                Some(m) => vec![cfg.filter_spec(&m).map(|_| m)?],
                None => cfg.filter.keys().cloned().collect(),
            };
            let sizes = particles.map_or_else(|| cfg.experiment.particles.clone(), |n| vec![n]);
            let seeds = seed.map_or_else(|| cfg.experiment.seeds.clone(), |s| vec![s]);
            println!("method,N,seed,rmse,mean_beta2,mean_aux,seconds,status");
            for m in &methods {
                for &n in &sizes {
                    for &s in &seeds {
                        let r = harness::run_filter_trajectory(&cfg, m, n, s)?;
                        println!(
                            "{},{},{},{},{},{},{:.1},{}",
                            r.method,
                            r.particles,
                            r.seed,
                            fmt_opt(r.rmse),
                            fmt_opt(r.mean_beta2),
                            fmt_opt(r.mean_aux),
                            r.wall_seconds,
                            r.failure.as_deref().unwrap_or(if r.diverged { "diverged" } else { "ok" })
                        );
                    }
                }
            }
        }
        Command::Sweep { config, out, workers } => {
            let cfg = load(&config)?;
            let Some(dir) = out.or_else(|| cfg.experiment.output.clone()) else {
                bail!("no output directory: pass --out or set experiment.output");
            };
            let result = harness::run_sweep(&cfg, &dir, workers)?;
            let failed = result.records.iter().filter(|r| r.diverged).count();
            eprintln!(
                "{} runs ({} diverged); wrote {} and {}",
                result.records.len(),
                failed,
                result.long_csv.display(),
                result.aggregate_csv.display()
            );
            print!("{}", std::fs::read_to_string(&result.aggregate_csv)?);
        }
        Command::Table { input } => {
            let path = input.join(harness::sweep::LONG_CSV);
            let rows = harness::read_long_csv(&path).with_context(|| format!("reading {}", path.display()))?;
            print!("{}", harness::aggregate_table(&rows)?);
        }
    }
    Ok(())
}
