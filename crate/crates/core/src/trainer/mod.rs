//! Baseline training and training with in-loop outlier removal.
//!
//! With removal enabled, every `removal_period` epochs the model runs an
//! evaluation pass over the active training set. Samples whose loss strictly
//! exceeds `gamma * mean_loss` are dropped for good. At each epoch listed in
//! `reinit_epochs` the network is re-drawn and Adam restarts, while the pruned
//! active set carries over. After the last re-initialization training runs
//! for `post_reinit_epochs` more epochs with the same removal cadence.

mod history;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AeModel, ModelError};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::phantom::{DatasetBundle, Label, Sample};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Tensor, TensorError};

pub use history::{
    read_audit_csv, read_events_csv, read_removals_csv, write_audit_csv, write_events_csv, write_history_csv,
    write_removals_csv, AuditRow, EventRow, HistoryRow, RemovalRow,
};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const REINIT_STREAM: u64 = 0x5245_494E;
/// Samples per gradient partial sum. Partial sums are reduced in order, so
/// results do not depend on the number of worker threads.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("all samples removed: no active training samples at epoch {epoch}")]
    AllSamplesRemoved { epoch: usize },
    #[error("losses do not cover the active set: {0}")]
    LossIdMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Csv(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub removal_period: usize,
    pub reinit_epochs: Vec<usize>,
    pub post_reinit_epochs: usize,
    pub gamma: f64,
    /// Permits `gamma <= 1`, which flags every above-average sample.
    #[serde(default)]
    pub allow_gamma_at_most_one: bool,
    pub shuffle_seed: u64,
    pub removal_enabled: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            removal_period: 5,
            reinit_epochs: vec![50, 100],
            post_reinit_epochs: 400,
            gamma: 1.3,
            allow_gamma_at_most_one: false,
            shuffle_seed: 0,
            removal_enabled: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            removal_period: 2,
            reinit_epochs: vec![10, 20],
            post_reinit_epochs: 40,
            ..Self::paper()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.reinit_epochs.last().copied().unwrap_or(0) + self.post_reinit_epochs
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.removal_period == 0 {
            return bad("removal_period must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and nonnegative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if self.reinit_epochs.first() == Some(&0) || self.reinit_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("reinit_epochs {:?} must be strictly increasing and positive", self.reinit_epochs));
        }
        if self.total_epochs() == 0 {
            return bad("schedule has no epochs".into());
        }
        if self.removal_enabled {
            if !self.gamma.is_finite() || self.gamma <= 0.0 {
                return bad(format!("gamma {} must be finite and positive", self.gamma));
            }
            if self.gamma <= 1.0 && !self.allow_gamma_at_most_one {
                return bad(format!(
                    "gamma {} <= 1 would prune every above-average sample; set allow_gamma_at_most_one to permit it",
                    self.gamma
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    /// Removal check after this epoch's training.
    pub removal_check: bool,
    /// Re-initialization (index into `reinit_epochs`) after the removal check.
    pub reinit: Option<usize>,
}

/// Epoch-by-epoch plan, 1-based. Without removal this is a plain loop of
/// `total_epochs` epochs with no checks and no re-initialization.
pub fn schedule(config: &TrainConfig) -> Vec<EpochPlan> {
    (1..=config.total_epochs())
        .map(|epoch| {
            if !config.removal_enabled {
                return EpochPlan {
                    epoch,
                    removal_check: false,
                    reinit: None,
                };
            }
            EpochPlan {
                epoch,
                removal_check: epoch % config.removal_period == 0,
                reinit: config.reinit_epochs.iter().position(|&e| e == epoch),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub total_epochs: usize,
    pub removal_checks: Vec<usize>,
    pub reinits: Vec<usize>,
}

/// Walks the schedule without touching any model.
pub fn simulate_schedule(config: &TrainConfig) -> Result<ScheduleTrace, TrainError> {
    config.validate()?;
    let plan = schedule(config);
    Ok(ScheduleTrace {
        total_epochs: plan.len(),
        removal_checks: plan.iter().filter(|p| p.removal_check).map(|p| p.epoch).collect(),
        reinits: plan.iter().filter(|p| p.reinit.is_some()).map(|p| p.epoch).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub id: String,
    pub loss: f64,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalEvent {
    pub epoch: usize,
    pub gamma: f64,
    pub mean_loss: f64,
    pub threshold: f64,
    /// Loss of every active sample at the check, sorted by id.
    pub losses: Vec<LossRecord>,
    pub removed: Vec<LossRecord>,
    pub active_before: usize,
    pub active_after: usize,
    /// Every sample exceeded the threshold; the lowest-loss one was kept.
    pub kept_last: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_loss: Option<f64>,
    /// Active samples after this epoch's removal check.
    pub active_count: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub removals: Vec<RemovalEvent>,
    pub reinit_epochs: Vec<usize>,
    pub final_active: Vec<String>,
}

impl TrainHistory {
    pub fn removed_ids(&self) -> impl Iterator<Item = &LossRecord> {
        self.removals.iter().flat_map(|e| &e.removed)
    }
}

/// `gamma * mean_loss`.
pub fn removal_threshold(mean_loss: f64, gamma: f64) -> f64 {
    gamma * mean_loss
}

/// Sum in slice order divided by count. Applied to id-sorted losses, this is
/// the reduction order behind every logged `mean_loss`.
pub fn mean_loss(losses: &[LossRecord]) -> f64 {
    losses.iter().fold(0.0, |acc, r| acc + r.loss) / losses.len() as f64
}

/// Evaluation pass: reconstruction loss of each sample, sorted by id.
pub fn per_sample_losses(model: &AeModel<f32>, samples: &[&Sample]) -> Result<Vec<LossRecord>, TrainError> {
    let mut out = samples
        .par_iter()
        .map(|s| {
            Ok(LossRecord {
                id: s.id.clone(),
                loss: model.anomaly_score(&s.volume)?,
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Drops every sample with loss strictly above `threshold`. If that would
/// empty the set, the lowest-loss sample stays and `kept_last` is set.
pub fn apply_removal(
    active: &[String],
    losses: &[LossRecord],
    threshold: f64,
) -> Result<(Vec<String>, Vec<LossRecord>, bool), TrainError> {
    let ids: BTreeSet<&str> = active.iter().map(String::as_str).collect();
    let scored: BTreeSet<&str> = losses.iter().map(|r| r.id.as_str()).collect();
    if ids.len() != active.len() || scored.len() != losses.len() || ids != scored {
        let missing: Vec<_> = ids.symmetric_difference(&scored).take(5).collect();
        return Err(TrainError::LossIdMismatch(format!(
            "{} active ids vs {} losses; differing ids {missing:?}",
            active.len(),
            losses.len()
        )));
    }
    let mut removed: Vec<LossRecord> = losses.iter().filter(|r| r.loss > threshold).cloned().collect();
    let mut kept_last = false;
    if removed.len() == losses.len() && !losses.is_empty() {
        let keep = losses
            .iter()
            .min_by(|a, b| a.loss.total_cmp(&b.loss).then_with(|| a.id.cmp(&b.id)))
            .expect("nonempty")
            .id
            .clone();
        removed.retain(|r| r.id != keep);
        kept_last = true;
    }
    let gone: BTreeSet<&str> = removed.iter().map(|r| r.id.as_str()).collect();
    let survivors = active.iter().filter(|id| !gone.contains(id.as_str())).cloned().collect();
    Ok((survivors, removed, kept_last))
}

/// One shuffled pass over `active` in batches of `batch_size`, one Adam step
/// per batch on the mean of per-sample losses. Returns the mean per-sample
/// loss seen during the epoch.
pub fn train_epoch(
    model: &mut AeModel<f32>,
    active: &[&Sample],
    state: &mut AdamState<f32>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    if active.is_empty() {
        return Err(TrainError::AllSamplesRemoved { epoch });
    }
    let mut order: Vec<usize> = (0..active.len()).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(config.shuffle_seed, SHUFFLE_STREAM, epoch as u64)));

    let mut loss_sum = 0.0f64;
    for batch in order.chunks(config.batch_size) {
        let partials = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc: Option<(Vec<f64>, Vec<Tensor<f32>>)> = None;
                for &i in chunk {
                    let (loss, grads) = model.loss_and_grads(&active[i].volume)?;
                    match &mut acc {
                        None => acc = Some((vec![loss], grads)),
                        Some((losses, sum)) => {
                            losses.push(loss);
                            for (s, g) in sum.iter_mut().zip(&grads) {
                                s.add_assign(g)?;
                            }
                        }
                    }
                }
                Ok(acc.expect("chunks are nonempty"))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;

        let mut partials = partials.into_iter();
        let (losses, mut total) = partials.next().expect("batch is nonempty");
        let mut batch_losses = losses;
        for (losses, grads) in partials {
            batch_losses.extend(losses);
            for (t, g) in total.iter_mut().zip(&grads) {
                t.add_assign(g)?;
            }
        }
        let scale = 1.0 / batch.len() as f32;
        for t in &mut total {
            t.scale(scale);
        }
        loss_sum += batch_losses.iter().sum::<f64>();
        adam_step(model.params_mut(), &total, state)?;
    }
    Ok(loss_sum / active.len() as f64)
}

fn validation_loss(model: &AeModel<f32>, val: &[Sample]) -> Result<Option<f64>, TrainError> {
    if val.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&Sample> = val.iter().collect();
    Ok(Some(mean_loss(&per_sample_losses(model, &refs)?)))
}

/// Training without removal or re-initialization for the full schedule length.
pub fn train_baseline(
    model: AeModel<f32>,
    dataset: &DatasetBundle,
    config: &TrainConfig,
) -> Result<(AeModel<f32>, TrainHistory), TrainError> {
    let config = TrainConfig {
        removal_enabled: false,
        ..config.clone()
    };
    run(model, dataset, &config, &mut |_, _| Ok(()))
}

/// Training with outlier removal. With `removal_enabled = false` this is
/// [`train_baseline`].
pub fn train_with_removal(
    model: AeModel<f32>,
    dataset: &DatasetBundle,
    config: &TrainConfig,
) -> Result<(AeModel<f32>, TrainHistory), TrainError> {
    run(model, dataset, config, &mut |_, _| Ok(()))
}

/// [`train_with_removal`] with a callback after every epoch, e.g. for
/// periodic checkpoints.
pub fn train_observed(
    model: AeModel<f32>,
    dataset: &DatasetBundle,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &AeModel<f32>) -> Result<(), TrainError>,
) -> Result<(AeModel<f32>, TrainHistory), TrainError> {
    run(model, dataset, config, observer)
}

fn run(
    mut model: AeModel<f32>,
    dataset: &DatasetBundle,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &AeModel<f32>) -> Result<(), TrainError>,
) -> Result<(AeModel<f32>, TrainHistory), TrainError> {
    config.validate()?;
    let mut by_id: Vec<&Sample> = dataset.train.iter().collect();
    by_id.sort_by(|a, b| a.id.cmp(&b.id));
    if by_id.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(TrainError::InvalidConfig("training sample ids are not unique".into()));
    }
    let mut active: Vec<&Sample> = by_id;
    let mut state = AdamState::new(config.adam(), model.params());
    let mut history = TrainHistory::default();

    for plan in schedule(config) {
        let started = Instant::now();
        let mean = train_epoch(&mut model, &active, &mut state, config, plan.epoch)?;

        if plan.removal_check {
            let losses = per_sample_losses(&model, &active)?;
            let mean_loss = mean_loss(&losses);
            let threshold = removal_threshold(mean_loss, config.gamma);
            let ids: Vec<String> = active.iter().map(|s| s.id.clone()).collect();
            let (survivors, removed, kept_last) = apply_removal(&ids, &losses, threshold)?;
            let keep: BTreeSet<&str> = survivors.iter().map(String::as_str).collect();
            let before = active.len();
            active.retain(|s| keep.contains(s.id.as_str()));
            history.removals.push(RemovalEvent {
                epoch: plan.epoch,
                gamma: config.gamma,
                mean_loss,
                threshold,
                losses,
                removed,
                active_before: before,
                active_after: active.len(),
                kept_last,
            });
        }

        let record = EpochRecord {
            epoch: plan.epoch,
            mean_loss: mean,
            val_loss: validation_loss(&model, &dataset.val)?,
            active_count: active.len(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record, &model)?;
        history.epochs.push(record);

        if let Some(k) = plan.reinit {
            model = model.reinitialize(derive_seed(config.shuffle_seed, REINIT_STREAM, k as u64));
            state = AdamState::new(config.adam(), model.params());
            history.reinit_epochs.push(plan.epoch);
        }
    }
    history.final_active = active.iter().map(|s| s.id.clone()).collect();
    Ok((model, history))
}
