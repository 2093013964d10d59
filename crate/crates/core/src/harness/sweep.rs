//! Sweeps over filters x ensemble sizes x seeds, with CSV output.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::run::{run_with_twin, twin_for_seed, RunRecord};

pub const LONG_CSV: &str = "long.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const DIAGNOSTICS_CSV: &str = "diagnostics.csv";

/// One row of the long-format results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub method: String,
    #[serde(rename = "N")]
    pub particles: usize,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
struct DiagnosticsRow<'a> {
    method: &'a str,
    #[serde(rename = "N")]
    particles: usize,
    seed: u64,
    mean_beta2: Option<f64>,
    mean_aux: Option<f64>,
    failure: Option<&'a str>,
}

impl From<&RunRecord> for LongRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            method: r.method.clone(),
            particles: r.particles,
            seed: r.seed,
            rmse: r.rmse,
            diverged: r.diverged,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    /// In filter, then ensemble-size, then seed order.
    pub records: Vec<RunRecord>,
    pub long_csv: PathBuf,
    pub aggregate_csv: PathBuf,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every (filter, N, seed) cell of `cfg`, `workers` at a time. Output
/// order and content do not depend on `workers`.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<SweepOutput> {
    let ex = &cfg.experiment;
    let pool = pool(workers)?;
    let twins = pool.install(|| {
        ex.seeds
            .par_iter()
            .map(|&s| twin_for_seed(cfg, s).map(|t| (s, t)))
            .collect::<Result<HashMap<_, _>>>()
    })?;
    let cells: Vec<(&str, usize, u64)> = cfg
        .filter
        .keys()
        .flat_map(|name| {
            ex.particles
                .iter()
                .flat_map(move |&n| ex.seeds.iter().map(move |&s| (name.as_str(), n, s)))
        })
        .collect();
    let records = pool.install(|| {
        cells
            .par_iter()
            .map(|&(name, n, s)| run_with_twin(cfg, name, n, s, &twins[&s]))
            .collect::<Result<Vec<_>>>()
    })?;

    std::fs::create_dir_all(out_dir)?;
    let long_csv = out_dir.join(LONG_CSV);
    let rows: Vec<LongRow> = records.iter().map(LongRow::from).collect();
    write_long_csv(&long_csv, &rows)?;

    let mut diag = csv::Writer::from_path(out_dir.join(DIAGNOSTICS_CSV))?;
    for r in &records {
        diag.serialize(DiagnosticsRow {
            method: &r.method,
            particles: r.particles,
            seed: r.seed,
            mean_beta2: r.mean_beta2,
            mean_aux: r.mean_aux,
            failure: r.failure.as_deref(),
        })?;
    }
    diag.flush()?;

    let aggregate_csv = out_dir.join(AGGREGATE_CSV);
    std::fs::write(&aggregate_csv, aggregate_table(&rows)?)?;
    Ok(SweepOutput {
        records,
        long_csv,
        aggregate_csv,
    })
}

pub fn write_long_csv(path: &Path, rows: &[LongRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_csv(path: &Path) -> Result<Vec<LongRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn first_seen<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

/// Wide table `N,<method>...` of mean RMSE over non-diverged seeds, in
/// first-appearance order. Cells with no finished run are empty.
pub fn aggregate_table(rows: &[LongRow]) -> Result<String> {
    let methods = first_seen(rows.iter().map(|r| r.method.as_str()));
    let sizes = first_seen(rows.iter().map(|r| r.particles));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["N".to_string()];
    header.extend(methods.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for &n in &sizes {
        let mut line = vec![n.to_string()];
        for &m in &methods {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m && r.particles == n && !r.diverged)
                .filter_map(|r| r.rmse)
                .collect();
            line.push(if vals.is_empty() {
                String::new()
            } else {
                (vals.iter().sum::<f64>() / vals.len() as f64).to_string()
            });
        }
        w.write_record(&line)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(m: &str, n: usize, s: u64, rmse: Option<f64>) -> LongRow {
        LongRow {
            method: m.into(),
            particles: n,
            seed: s,
            rmse,
            diverged: rmse.is_none(),
        }
    }

    #[test]
    fn aggregate_averages_finished_runs() {
        let rows = [
            row("B", 10, 1, Some(1.0)),
            row("B", 10, 2, Some(2.0)),
            row("A", 10, 1, None),
            row("A", 10, 2, Some(0.1)),
            row("B", 20, 1, Some(0.3)),
            row("A", 20, 1, None),
        ];
        let table = aggregate_table(&rows).unwrap();
        assert_eq!(table, "N,B,A\n10,1.5,0.1\n20,0.3,\n");
    }

    #[test]
    fn long_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LONG_CSV);
        let rows = vec![row("A", 5, 1, Some(0.123_456_789_012_345_67)), row("A", 5, 2, None)];
        write_long_csv(&path, &rows).unwrap();
        assert_eq!(read_long_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,N,seed,rmse,diverged\n"));
    }
}
