//! Sweep over seeds × impurity ratios × (baseline, γ grid).

use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::record::RunStatus;
use crate::run::{completed_row, run_cell, write_metrics_csv, Cell, CellOptions, CellSpec, MetricsRow};

/// Cells in output order: per seed, per ratio, the baseline then each γ.
pub fn plan_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &seed in &config.sweep.seeds {
        for &impurity_ratio in &config.sweep.impurity_ratios {
            if config.sweep.baseline {
                cells.push(Cell {
                    seed,
                    impurity_ratio,
                    gamma: None,
                });
            }
            cells.extend(config.sweep.gammas.iter().map(|&g| Cell {
                seed,
                impurity_ratio,
                gamma: Some(g),
            }));
        }
    }
    cells
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    /// Cells skipped because a finished run with the same hash was on disk.
    pub resumed: usize,
}

impl SweepOutcome {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

/// Runs every planned cell under `out/cells/` with at most `jobs` worker
/// threads, then writes `out/metrics.csv`.
pub fn run_sweep(config: &ExperimentConfig, out: &Path, jobs: usize) -> anyhow::Result<SweepOutcome> {
    let cells = plan_cells(config);
    anyhow::ensure!(!cells.is_empty(), "the sweep has no cells: check seeds, ratios, gammas and baseline");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let options = CellOptions {
        checkpoint_every: config.checkpoint_every,
        error_maps: 0,
    };

    let results: Vec<(MetricsRow, bool)> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| {
                let dir = out.join("cells").join(cell.dir_name());
                let hash = CellSpec::new(config, cell).hash();
                match completed_row(&dir, &hash) {
                    Some(row) => (row, true),
                    None => (run_cell(config, cell, None, &dir, options), false),
                }
            })
            .collect()
    });
    let resumed = results.iter().filter(|r| r.1).count();
    let rows: Vec<MetricsRow> = results.into_iter().map(|r| r.0).collect();
    write_metrics_csv(&rows, &out.join("metrics.csv"))?;
    Ok(SweepOutcome { rows, resumed })
}
