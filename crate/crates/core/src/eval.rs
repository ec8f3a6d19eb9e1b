//! Test-time scoring, AUROC, removal bookkeeping and slice export.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AeModel, ModelError};
use crate::phantom::{Label, Sample, Volume};
use crate::trainer::TrainHistory;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUROC needs both classes: {positives} unhealthy and {negatives} healthy scores")]
    SingleClass { positives: usize, negatives: usize },
    #[error("non-finite score {score} for `{id}`")]
    NonFiniteScore { id: String, score: f64 },
    #[error("slice {index} out of range for axis {axis} of extent {extent}")]
    SliceOutOfRange { axis: usize, index: usize, extent: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

pub trait AnomalyScorer: Sync {
    fn score(&self, volume: &Volume) -> Result<f64, EvalError>;
}

impl AnomalyScorer for AeModel<f32> {
    fn score(&self, volume: &Volume) -> Result<f64, EvalError> {
        Ok(self.anomaly_score(volume)?)
    }
}

/// Area under the ROC curve with unhealthy as the positive class. Ties count
/// one half (midranks), so the result equals the probability that a random
/// unhealthy score beats a random healthy one.
pub fn auroc(scores: &[ScoredSample]) -> Result<f64, EvalError> {
    if let Some(bad) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(EvalError::NonFiniteScore {
            id: bad.id.clone(),
            score: bad.score,
        });
    }
    let positives = scores.iter().filter(|s| s.label == Label::Unhealthy).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].score.total_cmp(&scores[b].score));

    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].score == scores[order[i]].score {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| scores[k].label == Label::Unhealthy).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Scores every sample with `scorer`, in parallel, keeping input order.
pub fn score_samples<S: AnomalyScorer>(scorer: &S, samples: &[&Sample]) -> Result<Vec<ScoredSample>, EvalError> {
    samples
        .par_iter()
        .map(|s| {
            Ok(ScoredSample {
                id: s.id.clone(),
                label: s.label,
                score: scorer.score(&s.volume)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub n_healthy: usize,
    pub n_unhealthy: usize,
    pub mean_score_healthy: f64,
    pub mean_score_unhealthy: f64,
    pub scores: Vec<ScoredSample>,
}

pub fn evaluate_run<S: AnomalyScorer>(
    scorer: &S,
    test_healthy: &[Sample],
    test_unhealthy: &[Sample],
) -> Result<MetricsReport, EvalError> {
    let all: Vec<&Sample> = test_healthy.iter().chain(test_unhealthy).collect();
    let scores = score_samples(scorer, &all)?;
    let auroc = auroc(&scores)?;
    let mean_of = |label| {
        let v: Vec<f64> = scores.iter().filter(|s| s.label == label).map(|s| s.score).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(MetricsReport {
        auroc,
        n_healthy: test_healthy.len(),
        n_unhealthy: test_unhealthy.len(),
        mean_score_healthy: mean_of(Label::Healthy),
        mean_score_unhealthy: mean_of(Label::Unhealthy),
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovedFractions {
    pub removed_healthy: usize,
    pub removed_unhealthy: usize,
    pub train_total: usize,
    /// Removed healthy samples over the whole initial training set.
    pub healthy_of_total: f64,
    /// Removed unhealthy samples over the whole initial training set.
    pub unhealthy_of_total: f64,
    /// Removed healthy samples over the initial healthy count.
    pub healthy_of_class: f64,
    /// Removed unhealthy samples over the initial unhealthy count; `None`
    /// when the training set had no unhealthy samples.
    pub unhealthy_of_class: Option<f64>,
}

pub fn removed_fractions(history: &TrainHistory, train_healthy: usize, train_unhealthy: usize) -> RemovedFractions {
    let count = |label| history.removed_ids().filter(|r| r.label == label).count();
    let (h, u) = (count(Label::Healthy), count(Label::Unhealthy));
    let total = train_healthy + train_unhealthy;
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    RemovedFractions {
        removed_healthy: h,
        removed_unhealthy: u,
        train_total: total,
        healthy_of_total: frac(h, total),
        unhealthy_of_total: frac(u, total),
        healthy_of_class: frac(h, train_healthy),
        unhealthy_of_class: (train_unhealthy > 0).then(|| frac(u, train_unhealthy)),
    }
}

/// Voxelwise `|x_hat - x|`.
pub fn error_map(model: &AeModel<f32>, volume: &Volume) -> Result<Volume, EvalError> {
    let (x_hat, _) = model.reconstruct(volume)?;
    let data = x_hat.data().iter().zip(volume.data()).map(|(a, b)| (a - b).abs()).collect();
    Ok(Volume::from_vec(volume.shape().to_vec(), data).map_err(ModelError::from)?)
}

/// Writes one slice of a volume as a binary PGM. Values are scaled by
/// `1 / max` (or 1 if `max` is `None`) and clamped to [0, 1].
pub fn write_pgm_slice(
    volume: &Volume,
    axis: usize,
    index: usize,
    max: Option<f32>,
    path: &Path,
) -> Result<(), EvalError> {
    let s = volume.shape();
    assert!(s.len() == 3 && axis < 3, "expected a 3-D volume and axis < 3");
    if index >= s[axis] {
        return Err(EvalError::SliceOutOfRange {
            axis,
            index,
            extent: s[axis],
        });
    }
    let (rows, cols) = match axis {
        0 => (s[1], s[2]),
        1 => (s[0], s[2]),
        _ => (s[0], s[1]),
    };
    let scale = 1.0 / max.filter(|m| *m > 0.0).unwrap_or(1.0);
    let at = |r: usize, c: usize| {
        let (d, h, w) = match axis {
            0 => (index, r, c),
            1 => (r, index, c),
            _ => (r, c, index),
        };
        volume.data()[(d * s[1] + h) * s[2] + w]
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            out.push(((at(r, c) * scale).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
}
