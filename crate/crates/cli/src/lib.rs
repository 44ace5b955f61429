//! Experiment harness: single runs, hyper-parameter grids and their reports.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ccl_core::config::GridCell;
use ccl_core::sim::{run_experiment, RunSummary};
use ccl_core::ExperimentConfig;
use serde::Serialize;

/// Runs every seed of `config` and writes each run under `out/seed_<s>/`.
pub fn run_seeds(config: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    config
        .seeds
        .iter()
        .map(|&seed| {
            let log = run_experiment(config, seed).with_context(|| format!("seed {seed}"))?;
            let dir = out.join(format!("seed_{seed}"));
            log.write_outputs(&dir, config)
                .with_context(|| format!("writing {}", dir.display()))
        })
        .collect()
}

/// One grid cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Set when any seed of the cell failed; the remaining fields then cover
    /// the seeds that finished.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Every (cell, seed) run of the grid. A failing run is recorded in its
/// row and the grid carries on. Per-run outputs go to `out/<cell>/seed_<s>/`.
pub fn run_grid(config: &ExperimentConfig, out: &Path) -> Result<GridReport> {
    let mut rows = Vec::new();
    for cell in config.grid_cells() {
        let cfg = config.for_cell(&cell);
        let mut accuracies = Vec::new();
        let mut errors = Vec::new();
        for &seed in &cfg.seeds {
            let dir = out.join(cell.slug()).join(format!("seed_{seed}"));
            let outcome = run_experiment(&cfg, seed)
                .map_err(anyhow::Error::from)
                .and_then(|log| Ok(log.write_outputs(&dir, &cfg)?));
            match outcome {
                Ok(summary) => accuracies.push(summary.final_test_accuracy),
                Err(e) => errors.push(format!("seed {seed}: {e:#}")),
            }
        }
        let (mean, std) = mean_std(&accuracies);
        rows.push(GridRow {
            cell,
            accuracies,
            mean,
            std,
            error: (!errors.is_empty()).then(|| errors.join("; ")),
        });
    }
    rows.sort_by(|a, b| a.cell.cmp_key(&b.cell));
    let report = GridReport { rows };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("grid_summary.txt"), report.table())?;
    std::fs::write(
        out.join("grid_summary.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

impl GridReport {
    /// Fixed-width text table, one row per cell.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<12} {:>10} {:>9} {:>9} {:<7} {:>5} {:>18}  status",
            "method", "alpha", "lambda_m", "lambda_d", "sim", "runs", "accuracy"
        )
        .unwrap();
        for r in &self.rows {
            let acc = if r.accuracies.is_empty() {
                "-".to_string()
            } else {
                format!("{:.4} ± {:.4}", r.mean, r.std)
            };
            writeln!(
                s,
                "{:<12} {:>10} {:>9} {:>9} {:<7} {:>5} {:>18}  {}",
                r.cell.method.to_string(),
                format!("{:?}", r.cell.alpha),
                format!("{:?}", r.cell.lambda_m),
                format!("{:?}", r.cell.lambda_d),
                r.cell.similarity.to_string(),
                r.accuracies.len(),
                acc,
                r.error.as_deref().unwrap_or("ok")
            )
            .unwrap();
        }
        s
    }
}
