//! CSV logs of a training run.
//!
//! - `history.csv`: one row per epoch. Wall time is left out so reruns
//!   write identical bytes.
//! - `removals.csv`: one row per removed sample.
//! - `events.csv`: one row per removal check.
//! - `audit.csv`: every active sample's loss at every check, enough to replay
//!   the removal rule offline.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{TrainError, TrainHistory};
use crate::phantom::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_loss: Option<f64>,
    pub active_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub epoch: usize,
    pub sample_id: String,
    pub loss: f64,
    pub threshold: f64,
    pub true_label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub epoch: usize,
    pub gamma: f64,
    pub mean_loss: f64,
    pub threshold: f64,
    pub active_before: usize,
    pub active_after: usize,
    pub removed: usize,
    pub kept_last: bool,
    pub reinit_after: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub epoch: usize,
    pub id: String,
    pub label: Label,
    pub loss: f64,
    pub removed: bool,
}

impl HistoryRow {
    pub const COLUMNS: &[&str] = &["epoch", "mean_loss", "val_loss", "active_count"];
}

impl RemovalRow {
    pub const COLUMNS: &[&str] = &["epoch", "sample_id", "loss", "threshold", "true_label"];
}

impl EventRow {
    pub const COLUMNS: &[&str] = &[
        "epoch",
        "gamma",
        "mean_loss",
        "threshold",
        "active_before",
        "active_after",
        "removed",
        "kept_last",
        "reinit_after",
    ];
}

impl AuditRow {
    pub const COLUMNS: &[&str] = &["epoch", "id", "label", "loss", "removed"];
}

/// Writes `columns` as the header even when `rows` is empty.
fn write_rows<R: Serialize>(path: &Path, columns: &[&str], rows: impl IntoIterator<Item = R>) -> Result<(), TrainError> {
    let err = |e: csv::Error| TrainError::Csv(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(err)?;
    w.write_record(columns).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| TrainError::Csv(format!("{}: {e}", path.display())))
}

fn read_rows<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>, TrainError> {
    let err = |e: csv::Error| TrainError::Csv(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(err)
}

pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    write_rows(
        path,
        HistoryRow::COLUMNS,
        history.epochs.iter().map(|e| HistoryRow {
            epoch: e.epoch,
            mean_loss: e.mean_loss,
            val_loss: e.val_loss,
            active_count: e.active_count,
        }),
    )
}

pub fn write_removals_csv(history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    write_rows(
        path,
        RemovalRow::COLUMNS,
        history.removals.iter().flat_map(|ev| {
            ev.removed.iter().map(move |r| RemovalRow {
                epoch: ev.epoch,
                sample_id: r.id.clone(),
                loss: r.loss,
                threshold: ev.threshold,
                true_label: r.label,
            })
        }),
    )
}

pub fn write_events_csv(history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    write_rows(
        path,
        EventRow::COLUMNS,
        history.removals.iter().map(|ev| EventRow {
            epoch: ev.epoch,
            gamma: ev.gamma,
            mean_loss: ev.mean_loss,
            threshold: ev.threshold,
            active_before: ev.active_before,
            active_after: ev.active_after,
            removed: ev.removed.len(),
            kept_last: ev.kept_last,
            reinit_after: history.reinit_epochs.contains(&ev.epoch),
        }),
    )
}

pub fn write_audit_csv(history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    write_rows(
        path,
        AuditRow::COLUMNS,
        history.removals.iter().flat_map(|ev| {
            ev.losses.iter().map(move |r| AuditRow {
                epoch: ev.epoch,
                id: r.id.clone(),
                label: r.label,
                loss: r.loss,
                removed: ev.removed.iter().any(|x| x.id == r.id),
            })
        }),
    )
}

pub fn read_removals_csv(path: &Path) -> Result<Vec<RemovalRow>, TrainError> {
    read_rows(path)
}

pub fn read_events_csv(path: &Path) -> Result<Vec<EventRow>, TrainError> {
    read_rows(path)
}

pub fn read_audit_csv(path: &Path) -> Result<Vec<AuditRow>, TrainError> {
    read_rows(path)
}
