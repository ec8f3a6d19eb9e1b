//! Aggregation of `metrics.csv` across seeds.
//!
//! - `auroc_vs_impurity.csv`: one row per (impurity, γ or baseline).
//! - `auroc_vs_gamma.csv`: per γ and impurity, the removal row and the
//!   baseline row, the baseline replicated across every γ.
//! - `removed_fractions.csv`: removal cells only.

use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use crate::record::RunStatus;
use crate::run::{read_metrics_csv, write_table, MetricsRow};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    /// `None` for an empty input. The mean is a left-to-right sum over `n`.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let sum: f64 = values.iter().sum();
        Some(Self {
            mean: sum / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

pub const AUROC_COLUMNS: &[&str] = &[
    "impurity_ratio",
    "gamma",
    "removal_enabled",
    "n_seeds",
    "auroc_mean",
    "auroc_min",
    "auroc_max",
];

pub const FRACTION_COLUMNS: &[&str] = &[
    "impurity_ratio",
    "gamma",
    "n_seeds",
    "removed_healthy_fraction_mean",
    "removed_healthy_fraction_min",
    "removed_healthy_fraction_max",
    "removed_unhealthy_fraction_mean",
    "removed_unhealthy_fraction_min",
    "removed_unhealthy_fraction_max",
    "removed_healthy_of_class_mean",
    "removed_unhealthy_of_class_mean",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AurocRow {
    pub impurity_ratio: f64,
    pub gamma: Option<f64>,
    pub removal_enabled: bool,
    pub n_seeds: usize,
    pub auroc_mean: f64,
    pub auroc_min: f64,
    pub auroc_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FractionRow {
    pub impurity_ratio: f64,
    pub gamma: f64,
    pub n_seeds: usize,
    pub removed_healthy_fraction_mean: f64,
    pub removed_healthy_fraction_min: f64,
    pub removed_healthy_fraction_max: f64,
    pub removed_unhealthy_fraction_mean: f64,
    pub removed_unhealthy_fraction_min: f64,
    pub removed_unhealthy_fraction_max: f64,
    pub removed_healthy_of_class_mean: f64,
    pub removed_unhealthy_of_class_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub by_impurity: Vec<AurocRow>,
    pub by_gamma: Vec<AurocRow>,
    pub fractions: Vec<FractionRow>,
    /// Failed rows in the input, excluded from every table.
    pub skipped_failed: usize,
}

struct Group<'a> {
    impurity_ratio: f64,
    gamma: Option<f64>,
    rows: Vec<&'a MetricsRow>,
}

impl Group<'_> {
    fn column(&self, f: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<f64> {
        self.rows.iter().filter_map(|r| f(r)).collect()
    }

    fn auroc_row(&self, gamma: Option<f64>) -> anyhow::Result<AurocRow> {
        let s = stat(&self.column(|r| r.auroc), "auroc")?;
        Ok(AurocRow {
            impurity_ratio: self.impurity_ratio,
            gamma,
            removal_enabled: self.gamma.is_some(),
            n_seeds: self.rows.len(),
            auroc_mean: s.mean,
            auroc_min: s.min,
            auroc_max: s.max,
        })
    }
}

fn stat(values: &[f64], what: &str) -> anyhow::Result<Stat> {
    Stat::of(values).with_context(|| format!("ok rows without a {what} value"))
}

fn sort_key(ratio: f64, gamma: Option<f64>) -> (f64, f64) {
    (ratio, gamma.unwrap_or(f64::NEG_INFINITY))
}

pub fn build_report(rows: &[MetricsRow]) -> anyhow::Result<Report> {
    anyhow::ensure!(!rows.is_empty(), "metrics table is empty");
    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| r.status == RunStatus::Ok).collect();
    anyhow::ensure!(!ok.is_empty(), "all {} metrics rows are failed runs", rows.len());

    let mut groups: Vec<Group> = Vec::new();
    for row in ok {
        let same = |g: &&mut Group| g.impurity_ratio == row.impurity_ratio && g.gamma == row.gamma;
        match groups.iter_mut().find(|g| same(g)) {
            Some(g) => g.rows.push(row),
            None => groups.push(Group {
                impurity_ratio: row.impurity_ratio,
                gamma: row.gamma,
                rows: vec![row],
            }),
        }
    }
    groups.sort_by(|a, b| {
        sort_key(a.impurity_ratio, a.gamma)
            .partial_cmp(&sort_key(b.impurity_ratio, b.gamma))
            .expect("finite keys")
    });

    let by_impurity = groups.iter().map(|g| g.auroc_row(g.gamma)).collect::<anyhow::Result<Vec<_>>>()?;

    let mut gammas: Vec<f64> = groups.iter().filter_map(|g| g.gamma).collect();
    gammas.sort_by(|a, b| a.partial_cmp(b).expect("finite gamma"));
    gammas.dedup();
    let mut by_gamma = Vec::new();
    for &gamma in &gammas {
        for g in &groups {
            if g.gamma == Some(gamma) || g.gamma.is_none() {
                by_gamma.push(g.auroc_row(Some(gamma))?);
            }
        }
    }
    by_gamma.sort_by(|a, b| {
        (a.gamma, a.impurity_ratio, a.removal_enabled)
            .partial_cmp(&(b.gamma, b.impurity_ratio, b.removal_enabled))
            .expect("finite keys")
    });

    let mut fractions = Vec::new();
    for g in groups.iter().filter(|g| g.gamma.is_some()) {
        let h = stat(&g.column(|r| r.removed_healthy_fraction), "removed_healthy_fraction")?;
        let u = stat(&g.column(|r| r.removed_unhealthy_fraction), "removed_unhealthy_fraction")?;
        let hc = stat(&g.column(|r| r.removed_healthy_of_class), "removed_healthy_of_class")?;
        let uc = Stat::of(&g.column(|r| r.removed_unhealthy_of_class));
        fractions.push(FractionRow {
            impurity_ratio: g.impurity_ratio,
            gamma: g.gamma.expect("filtered"),
            n_seeds: g.rows.len(),
            removed_healthy_fraction_mean: h.mean,
            removed_healthy_fraction_min: h.min,
            removed_healthy_fraction_max: h.max,
            removed_unhealthy_fraction_mean: u.mean,
            removed_unhealthy_fraction_min: u.min,
            removed_unhealthy_fraction_max: u.max,
            removed_healthy_of_class_mean: hc.mean,
            removed_unhealthy_of_class_mean: uc.map(|s| s.mean),
        });
    }

    Ok(Report {
        by_impurity,
        by_gamma,
        fractions,
        skipped_failed: rows.len() - groups.iter().map(|g| g.rows.len()).sum::<usize>(),
    })
}

/// Reads `metrics` and writes the three tables into `out`.
pub fn cmd_report(metrics: &Path, out: &Path) -> anyhow::Result<Report> {
    let rows = read_metrics_csv(metrics)?;
    let report = build_report(&rows).with_context(|| format!("{}", metrics.display()))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_table(&out.join("auroc_vs_impurity.csv"), AUROC_COLUMNS, &report.by_impurity)?;
    write_table(&out.join("auroc_vs_gamma.csv"), AUROC_COLUMNS, &report.by_gamma)?;
    write_table(&out.join("removed_fractions.csv"), FRACTION_COLUMNS, &report.fractions)?;
    Ok(report)
}
