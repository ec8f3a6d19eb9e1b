//! `generate` and `train`; `sweep` and `report` live in their own modules.

use std::path::{Path, PathBuf};

use anyhow::Context;
use sievae_core::phantom::{build_dataset, load_bundle, save_bundle};

use crate::config::ExperimentConfig;
use crate::record::RunStatus;
use crate::run::{run_cell, Cell, CellOptions, MetricsRow};

/// Directory of the bundle for one impurity ratio under a generate root.
pub fn bundle_dir(out: &Path, ratio: f64) -> PathBuf {
    out.join(format!("impurity-{ratio}"))
}

/// Writes one bundle per configured impurity ratio, all from `config.seed`.
/// Nothing time-dependent is written, so a rerun rewrites identical bytes.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for &ratio in &config.sweep.impurity_ratios {
        let bundle = build_dataset(config.counts, ratio, config.seed, &config.phantom, &config.lesion)?;
        let dir = bundle_dir(out, ratio);
        save_bundle(&bundle, &dir).with_context(|| format!("writing {}", dir.display()))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    /// A bundle written by `generate`; otherwise one is built in memory.
    pub dataset: Option<PathBuf>,
    /// Impurity of the in-memory bundle; ignored with `dataset`.
    pub impurity: f64,
    /// Overrides `train.gamma`.
    pub gamma: Option<f64>,
    pub no_removal: bool,
}

/// Trains one model into `out`. A failed run is an error after its
/// `run.json` has been written.
pub fn cmd_train(config: &ExperimentConfig, args: &TrainArgs, out: &Path) -> anyhow::Result<MetricsRow> {
    let bundle = match &args.dataset {
        Some(path) => Some(load_bundle(path).with_context(|| format!("loading dataset {}", path.display()))?),
        None => None,
    };
    let cell = Cell {
        seed: config.seed,
        impurity_ratio: bundle.as_ref().map_or(args.impurity, |b| b.impurity_ratio),
        gamma: (!args.no_removal).then(|| args.gamma.unwrap_or(config.train.gamma)),
    };
    let options = CellOptions {
        checkpoint_every: config.checkpoint_every,
        error_maps: 2,
    };
    let row = run_cell(config, cell, bundle.as_ref(), out, options);
    match row.status {
        RunStatus::Ok => Ok(row),
        RunStatus::Failed => anyhow::bail!("training failed: {}", row.error.as_deref().unwrap_or("unknown error")),
    }
}
