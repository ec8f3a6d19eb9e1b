use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_sample, Label, LesionSpec, PhantomError, PhantomSpec, Sample};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub train_healthy: usize,
    pub val: usize,
    pub test_healthy: usize,
    pub test_unhealthy: usize,
}

impl DatasetCounts {
    pub fn desk() -> Self {
        Self {
            train_healthy: 100,
            val: 20,
            test_healthy: 40,
            test_unhealthy: 20,
        }
    }

    pub fn paper() -> Self {
        Self {
            train_healthy: 600,
            val: 153,
            test_healthy: 320,
            test_unhealthy: 160,
        }
    }
}

/// Number of unhealthy samples injected for a given impurity ratio:
/// `round(ratio * train_healthy)`, halves rounded up.
pub fn injected_count(ratio: f64, train_healthy: usize) -> usize {
    (ratio * train_healthy as f64 + 0.5).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    TrainHealthy,
    TrainInjected,
    Val,
    TestHealthy,
    TestUnhealthy,
}

impl Split {
    const ALL: [Split; 5] = [
        Split::TrainHealthy,
        Split::TrainInjected,
        Split::Val,
        Split::TestHealthy,
        Split::TestUnhealthy,
    ];

    fn prefix(self) -> &'static str {
        match self {
            Split::TrainHealthy => "train-h",
            Split::TrainInjected => "train-u",
            Split::Val => "val",
            Split::TestHealthy => "test-h",
            Split::TestUnhealthy => "test-u",
        }
    }

    /// Seed stream per split. Streams do not depend on the impurity ratio, so
    /// bundles built from one master seed share every healthy sample and the
    /// injected set of a lower ratio is a prefix of a higher one.
    fn stream(self) -> u64 {
        match self {
            Split::TrainHealthy => 0x7452_4148,
            Split::TrainInjected => 0x7452_4155,
            Split::Val => 0x5641_4C00,
            Split::TestHealthy => 0x5445_5348,
            Split::TestUnhealthy => 0x5445_5355,
        }
    }

    pub fn label(self) -> Label {
        match self {
            Split::TrainInjected | Split::TestUnhealthy => Label::Unhealthy,
            _ => Label::Healthy,
        }
    }

    pub fn sample_id(self, index: usize) -> String {
        format!("{}-{index:05}", self.prefix())
    }

    /// Split encoded in a sample id.
    pub fn of_id(id: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| {
            id.strip_prefix(s.prefix())
                .and_then(|rest| rest.strip_prefix('-'))
                .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub seed: u64,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    /// Healthy training samples followed by the injected unhealthy ones.
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_healthy: Vec<Sample>,
    pub test_unhealthy: Vec<Sample>,
    pub impurity_ratio: f64,
    pub manifest: Vec<ManifestEntry>,
}

impl DatasetBundle {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test_healthy)
            .chain(&self.test_unhealthy)
    }

    pub fn train_count(&self, label: Label) -> usize {
        self.train.iter().filter(|s| s.label == label).count()
    }
}

/// Builds all splits for one impurity level. Each sample's seed is
/// `derive_seed(master_seed, split_stream, index)`.
pub fn build_dataset(
    counts: DatasetCounts,
    impurity_ratio: f64,
    master_seed: u64,
    phantom: &PhantomSpec,
    lesion: &LesionSpec,
) -> Result<DatasetBundle, PhantomError> {
    if !(0.0..1.0).contains(&impurity_ratio) {
        return Err(PhantomError::InvalidDataset(format!(
            "impurity ratio {impurity_ratio} must lie in [0, 1)"
        )));
    }
    phantom.validate()?;
    lesion.validate_for(phantom)?;

    let split = |split: Split, n: usize| -> Result<Vec<Sample>, PhantomError> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(master_seed, split.stream(), i as u64);
                let mut s = generate_sample(seed, split.label(), phantom, lesion)?;
                s.id = split.sample_id(i);
                Ok(s)
            })
            .collect()
    };

    let mut train = split(Split::TrainHealthy, counts.train_healthy)?;
    train.extend(split(
        Split::TrainInjected,
        injected_count(impurity_ratio, counts.train_healthy),
    )?);
    let val = split(Split::Val, counts.val)?;
    let test_healthy = split(Split::TestHealthy, counts.test_healthy)?;
    let test_unhealthy = split(Split::TestUnhealthy, counts.test_unhealthy)?;

    let manifest = train
        .iter()
        .chain(&val)
        .chain(&test_healthy)
        .chain(&test_unhealthy)
        .map(|s| ManifestEntry {
            id: s.id.clone(),
            label: s.label,
            seed: s.seed,
            path: String::new(),
        })
        .collect();

    Ok(DatasetBundle {
        train,
        val,
        test_healthy,
        test_unhealthy,
        impurity_ratio,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(train_healthy: usize) -> DatasetCounts {
        DatasetCounts {
            train_healthy,
            val: 3,
            test_healthy: 4,
            test_unhealthy: 2,
        }
    }

    #[test]
    fn injected_counts_follow_round_half_up() {
        assert_eq!(injected_count(0.0, 600), 0);
        assert_eq!(injected_count(0.03, 600), 18);
        assert_eq!(injected_count(0.06, 600), 36);
        assert_eq!(injected_count(0.12, 600), 72);
        assert_eq!(injected_count(0.12, 100), 12);
        assert_eq!(injected_count(0.03, 100), 3);
        assert_eq!(injected_count(0.125, 4), 1);
        assert_eq!(injected_count(0.1, 5), 1);
    }

    #[test]
    fn clean_bundle_has_no_unhealthy_training_samples() {
        let b = build_dataset(small(10), 0.0, 1, &PhantomSpec::desk(), &LesionSpec::desk()).unwrap();
        assert_eq!(b.train_count(Label::Unhealthy), 0);
        assert_eq!(b.train.len(), 10);
        assert!(b.test_unhealthy.iter().all(|s| s.lesion_mask.is_some()));
    }

    #[test]
    fn bundle_is_deterministic_and_splits_disjoint() {
        let (p, l) = (PhantomSpec::desk(), LesionSpec::desk());
        let a = build_dataset(small(25), 0.12, 9, &p, &l).unwrap();
        let b = build_dataset(small(25), 0.12, 9, &p, &l).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_count(Label::Unhealthy), 3);
        let ids: HashSet<_> = a.all_samples().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), a.manifest.len());
        assert_eq!(a.manifest.len(), 25 + 3 + 3 + 4 + 2);
        for s in a.all_samples() {
            assert_eq!(Split::of_id(&s.id).unwrap().label(), s.label);
            assert_eq!(s.label == Label::Unhealthy, s.lesion_mask.is_some());
        }
    }

    #[test]
    fn impurity_levels_share_healthy_samples() {
        let (p, l) = (PhantomSpec::desk(), LesionSpec::desk());
        let lo = build_dataset(small(25), 0.04, 5, &p, &l).unwrap();
        let hi = build_dataset(small(25), 0.12, 5, &p, &l).unwrap();
        assert_eq!(lo.test_healthy, hi.test_healthy);
        assert_eq!(lo.test_unhealthy, hi.test_unhealthy);
        assert_eq!(lo.train[..], hi.train[..lo.train.len()]);
    }

    #[test]
    fn ratio_out_of_range_rejected() {
        let (p, l) = (PhantomSpec::desk(), LesionSpec::desk());
        assert!(build_dataset(small(5), 1.0, 0, &p, &l).is_err());
        assert!(build_dataset(small(5), -0.1, 0, &p, &l).is_err());
    }

    #[test]
    fn split_parsing() {
        assert_eq!(Split::of_id("train-u-00003"), Some(Split::TrainInjected));
        assert_eq!(Split::of_id("test-h-00000"), Some(Split::TestHealthy));
        assert_eq!(Split::of_id("val-12"), Some(Split::Val));
        assert_eq!(Split::of_id("val-"), None);
        assert_eq!(Split::of_id("train-x-1"), None);
    }
}
