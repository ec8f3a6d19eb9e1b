//! One training cell: build or load the dataset, train, evaluate, write
//! artifacts and a `run.json` record into the cell directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sievae_core::eval::{error_map, evaluate_run, removed_fractions, write_pgm_slice, MetricsReport, ScoredSample};
use sievae_core::model::{init_model, save_checkpoint, AeConfig};
use sievae_core::phantom::{build_dataset, save_volume, DatasetBundle, DatasetCounts, Label, LesionSpec, PhantomSpec};
use sievae_core::rng::derive_seed;
use sievae_core::trainer::{
    train_observed, write_audit_csv, write_events_csv, write_history_csv, write_removals_csv, TrainConfig,
    TrainError, TrainHistory,
};

use crate::config::ExperimentConfig;
use crate::record::{config_hash, timestamp, version_string, RunRecord, RunStatus};

const INIT_STREAM: u64 = 0x494E_4954;
const SHUFFLE_STREAM: u64 = 0x5348_554F;

/// One point of the sweep grid. `gamma: None` is the baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub impurity_ratio: f64,
    pub gamma: Option<f64>,
}

impl Cell {
    pub fn removal_enabled(&self) -> bool {
        self.gamma.is_some()
    }

    /// `seed-1/impurity-0.12/gamma-1.3`, or `.../baseline`.
    pub fn dir_name(&self) -> PathBuf {
        let last = match self.gamma {
            Some(g) => format!("gamma-{g}"),
            None => "baseline".into(),
        };
        PathBuf::from(format!("seed-{}", self.seed))
            .join(format!("impurity-{}", self.impurity_ratio))
            .join(last)
    }
}

/// Everything that determines a cell's results. Its hash keys resumption.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSpec {
    pub version: String,
    pub cell: Cell,
    pub counts: DatasetCounts,
    pub phantom: PhantomSpec,
    pub lesion: LesionSpec,
    pub model: AeConfig,
    pub train: TrainConfig,
}

impl CellSpec {
    pub fn new(config: &ExperimentConfig, cell: Cell) -> Self {
        let model = AeConfig {
            init_seed: derive_seed(cell.seed, INIT_STREAM, 0),
            ..config.model.clone()
        };
        let train = TrainConfig {
            shuffle_seed: derive_seed(cell.seed, SHUFFLE_STREAM, 0),
            removal_enabled: cell.removal_enabled(),
            gamma: cell.gamma.unwrap_or(config.train.gamma),
            ..config.train.clone()
        };
        Self {
            version: version_string(),
            cell,
            counts: config.counts,
            phantom: config.phantom.clone(),
            lesion: config.lesion.clone(),
            model,
            train,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn build_dataset(&self) -> anyhow::Result<DatasetBundle> {
        Ok(build_dataset(
            self.counts,
            self.cell.impurity_ratio,
            self.cell.seed,
            &self.phantom,
            &self.lesion,
        )?)
    }
}

/// One `metrics.csv` row. Metric columns are empty on failed rows. Column
/// order is the field order below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub status: RunStatus,
    pub impurity_ratio: f64,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub removal_enabled: bool,
    pub auroc: Option<f64>,
    pub n_healthy: Option<usize>,
    pub n_unhealthy: Option<usize>,
    pub mean_score_healthy: Option<f64>,
    pub mean_score_unhealthy: Option<f64>,
    pub train_healthy: Option<usize>,
    pub train_unhealthy: Option<usize>,
    pub removed_healthy: Option<usize>,
    pub removed_unhealthy: Option<usize>,
    /// Removed healthy count over the whole initial training set.
    pub removed_healthy_fraction: Option<f64>,
    /// Removed unhealthy count over the whole initial training set.
    pub removed_unhealthy_fraction: Option<f64>,
    pub removed_healthy_of_class: Option<f64>,
    pub removed_unhealthy_of_class: Option<f64>,
    pub final_active: Option<usize>,
    pub config_hash: String,
    pub error: Option<String>,
}

impl MetricsRow {
    fn failed(cell: Cell, hash: String, error: String) -> Self {
        Self {
            status: RunStatus::Failed,
            impurity_ratio: cell.impurity_ratio,
            gamma: cell.gamma,
            seed: cell.seed,
            removal_enabled: cell.removal_enabled(),
            auroc: None,
            n_healthy: None,
            n_unhealthy: None,
            mean_score_healthy: None,
            mean_score_unhealthy: None,
            train_healthy: None,
            train_unhealthy: None,
            removed_healthy: None,
            removed_unhealthy: None,
            removed_healthy_fraction: None,
            removed_unhealthy_fraction: None,
            removed_healthy_of_class: None,
            removed_unhealthy_of_class: None,
            final_active: None,
            config_hash: hash,
            error: Some(error),
        }
    }

    fn ok(cell: Cell, hash: String, data: &DatasetBundle, history: &TrainHistory, report: &MetricsReport) -> Self {
        let (h, u) = (data.train_count(Label::Healthy), data.train_count(Label::Unhealthy));
        let f = removed_fractions(history, h, u);
        Self {
            status: RunStatus::Ok,
            auroc: Some(report.auroc),
            n_healthy: Some(report.n_healthy),
            n_unhealthy: Some(report.n_unhealthy),
            mean_score_healthy: Some(report.mean_score_healthy),
            mean_score_unhealthy: Some(report.mean_score_unhealthy),
            train_healthy: Some(h),
            train_unhealthy: Some(u),
            removed_healthy: Some(f.removed_healthy),
            removed_unhealthy: Some(f.removed_unhealthy),
            removed_healthy_fraction: Some(f.healthy_of_total),
            removed_unhealthy_fraction: Some(f.unhealthy_of_total),
            removed_healthy_of_class: Some(f.healthy_of_class),
            removed_unhealthy_of_class: f.unhealthy_of_class,
            final_active: Some(history.final_active.len()),
            error: None,
            ..Self::failed(cell, hash, String::new())
        }
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> anyhow::Result<()> {
    write_table(path, &METRICS_COLUMNS, rows)
}

/// CSV with a `\n` terminator and `columns` as the header, written even
/// when `rows` is empty.
pub(crate) fn write_table<R: Serialize>(path: &Path, columns: &[&str], rows: &[R]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(columns)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    anyhow::ensure!(
        header == METRICS_COLUMNS,
        "{}: unexpected columns {header:?}, expected {METRICS_COLUMNS:?}",
        path.display()
    );
    reader
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub const METRICS_COLUMNS: [&str; 21] = [
    "status",
    "impurity_ratio",
    "gamma",
    "seed",
    "removal_enabled",
    "auroc",
    "n_healthy",
    "n_unhealthy",
    "mean_score_healthy",
    "mean_score_unhealthy",
    "train_healthy",
    "train_unhealthy",
    "removed_healthy",
    "removed_unhealthy",
    "removed_healthy_fraction",
    "removed_unhealthy_fraction",
    "removed_healthy_of_class",
    "removed_unhealthy_of_class",
    "final_active",
    "config_hash",
    "error",
];

#[derive(Clone, Copy, Debug, Default)]
pub struct CellOptions {
    /// Periodic checkpoint cadence in epochs; 0 writes only the final model.
    pub checkpoint_every: usize,
    /// Error maps exported for the first this many test samples per class.
    pub error_maps: usize,
}

/// Runs one cell into `dir`. Failures are captured in the returned row and
/// in `run.json`, never propagated. `dataset` overrides the generated one.
pub fn run_cell(
    config: &ExperimentConfig,
    cell: Cell,
    dataset: Option<&DatasetBundle>,
    dir: &Path,
    options: CellOptions,
) -> MetricsRow {
    let spec = CellSpec::new(config, cell);
    let hash = spec.hash();
    let started = timestamp();
    let mut artifacts = Vec::new();
    let outcome = execute(&spec, dataset, dir, options, &mut artifacts);
    let row = match outcome {
        Ok(row) => row,
        Err(e) => MetricsRow::failed(cell, hash.clone(), format!("{e:#}")),
    };
    let record = RunRecord {
        config_hash: hash,
        version: spec.version.clone(),
        started,
        finished: timestamp(),
        status: row.status,
        error: row.error.clone(),
        artifacts,
    };
    if let Err(e) = fs::create_dir_all(dir).and_then(|_| record.write(&dir.join("run.json"))) {
        return MetricsRow::failed(cell, record.config_hash, format!("writing run.json: {e}"));
    }
    row
}

fn execute(
    spec: &CellSpec,
    dataset: Option<&DatasetBundle>,
    dir: &Path,
    options: CellOptions,
    artifacts: &mut Vec<String>,
) -> anyhow::Result<MetricsRow> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let owned;
    let data = match dataset {
        Some(d) => d,
        None => {
            owned = spec.build_dataset()?;
            &owned
        }
    };
    let model = init_model::<f32>(&spec.model)?;

    if options.checkpoint_every > 0 {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut saved = Vec::new();
    let mut observer = |record: &sievae_core::trainer::EpochRecord, m: &sievae_core::model::AeModel<f32>| {
        if options.checkpoint_every > 0 && record.epoch % options.checkpoint_every == 0 {
            let rel = format!("checkpoints/epoch-{:04}.ckpt", record.epoch);
            save_checkpoint(m, &dir.join(&rel)).map_err(TrainError::from)?;
            saved.push(rel);
        }
        Ok(())
    };
    let (model, history) = train_observed(model, data, &spec.train, &mut observer)?;
    artifacts.extend(saved);

    let mut emit = |name: &str| {
        artifacts.push(name.to_string());
        dir.join(name)
    };
    save_checkpoint(&model, &emit("model.ckpt"))?;
    write_history_csv(&history, &emit("history.csv"))?;
    write_removals_csv(&history, &emit("removals.csv"))?;
    write_events_csv(&history, &emit("events.csv"))?;
    write_audit_csv(&history, &emit("audit.csv"))?;

    let report = evaluate_run(&model, &data.test_healthy, &data.test_unhealthy)?;
    write_scores_csv(&report.scores, &emit("scores.csv"))?;

    if options.error_maps > 0 {
        fs::create_dir_all(dir.join("error_maps"))?;
        let picks = data
            .test_healthy
            .iter()
            .take(options.error_maps)
            .chain(data.test_unhealthy.iter().take(options.error_maps));
        for sample in picks {
            let map = error_map(&model, &sample.volume)?;
            save_volume(&map, &emit(&format!("error_maps/{}.vol", sample.id)))?;
            let mid = map.shape()[0] / 2;
            write_pgm_slice(&map, 0, mid, Some(map.max()), &emit(&format!("error_maps/{}.pgm", sample.id)))?;
        }
    }

    let row = MetricsRow::ok(spec.cell, spec.hash(), data, &history, &report);
    write_metrics_csv(std::slice::from_ref(&row), &emit("metrics.csv"))?;
    Ok(row)
}

fn write_scores_csv(scores: &[ScoredSample], path: &Path) -> anyhow::Result<()> {
    write_table(path, &["id", "label", "score"], scores)
}

/// The row of a previous successful run in `dir` whose config hash equals
/// `hash`, if any.
pub fn completed_row(dir: &Path, hash: &str) -> Option<MetricsRow> {
    let record = RunRecord::read(&dir.join("run.json")).ok()?;
    if record.status != RunStatus::Ok || record.config_hash != hash {
        return None;
    }
    let mut rows = read_metrics_csv(&dir.join("metrics.csv")).ok()?;
    (rows.len() == 1 && rows[0].config_hash == hash).then(|| rows.remove(0))
}
