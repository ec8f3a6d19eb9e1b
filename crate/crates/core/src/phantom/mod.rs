//! Synthetic brain-like phantoms and hyperintense lesion injection.
//!
//! A healthy phantom is a head ellipsoid (bright tissue) wrapped in a darker
//! cortical band, with one or more dark ventricles near the centre, a smooth
//! multiplicative bias field and Gaussian noise inside the head. The
//! background is exactly zero, which is how the brain mask is recovered from
//! any volume, including ones loaded from disk.

mod dataset;
mod io;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

pub use dataset::{build_dataset, DatasetBundle, DatasetCounts, ManifestEntry, Split};
pub use io::{load_bundle, load_volume, read_manifest, save_bundle, save_volume, write_manifest, VolumeIoError};

/// Dense `D x H x W` scalar field.
pub type Volume = Tensor<f32>;

const LESION_STREAM: u64 = 0x4C45_5349_4F4E;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),
    #[error("invalid lesion spec: {0}")]
    InvalidLesion(String),
    #[error("sample `{0}` is not healthy; lesions are only injected into healthy samples")]
    NotHealthy(String),
    #[error("no site for a lesion of radius {radius} with margin {margin} fits inside the brain of `{id}`")]
    PlacementInfeasible { id: String, radius: usize, margin: usize },
    #[error("invalid dataset request: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Io(#[from] VolumeIoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Unhealthy,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Unhealthy => "unhealthy",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "healthy" => Ok(Label::Healthy),
            "unhealthy" => Ok(Label::Unhealthy),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Generated,
    Injected,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub label: Label,
    /// Binary (0/1) mask of lesion voxels; present iff the sample is unhealthy.
    pub lesion_mask: Option<Volume>,
    pub source: Source,
    pub seed: u64,
}

/// Inclusive range `[lo, hi]`.
pub type Range = (f64, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    /// Head ellipsoid semi-axes as fractions of each extent.
    pub head_semi_axes: [f64; 3],
    /// Per-sample multiplicative jitter on the head semi-axes.
    pub head_scale: Range,
    /// Maximum centre offset, as a fraction of each extent.
    pub center_jitter: f64,
    pub tissue_intensity: Range,
    pub cortex_intensity: Range,
    /// Cortical band thickness as a fraction of the normalized head radius.
    pub cortex_thickness: Range,
    pub ventricle_count: (usize, usize),
    /// Ventricle semi-axes as fractions of the head semi-axes.
    pub ventricle_size: Range,
    pub ventricle_intensity: Range,
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
    /// Width in voxels of the linear partial-volume ramp at every structure
    /// boundary. 0 gives hard edges.
    #[serde(default)]
    pub edge_softness: f64,
}

impl PhantomSpec {
    pub fn desk() -> Self {
        Self::with_shape([16, 16, 16])
    }

    /// Default anatomy at an arbitrary grid size.
    pub fn with_shape(shape: [usize; 3]) -> Self {
        Self {
            shape,
            head_semi_axes: [0.42, 0.44, 0.40],
            head_scale: (0.88, 1.0),
            center_jitter: 0.03,
            tissue_intensity: (0.55, 0.7),
            cortex_intensity: (0.35, 0.45),
            cortex_thickness: (0.15, 0.25),
            ventricle_count: (1, 2),
            ventricle_size: (0.15, 0.3),
            ventricle_intensity: (0.1, 0.2),
            bias_amplitude: 0.05,
            noise_sigma: 0.02,
            edge_softness: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidPhantom(m));
        if self.shape.contains(&0) {
            return bad(format!("shape {:?} has a zero extent", self.shape));
        }
        let ranges = [
            ("head_scale", self.head_scale),
            ("tissue_intensity", self.tissue_intensity),
            ("cortex_intensity", self.cortex_intensity),
            ("cortex_thickness", self.cortex_thickness),
            ("ventricle_size", self.ventricle_size),
            ("ventricle_intensity", self.ventricle_intensity),
        ];
        for (name, (lo, hi)) in ranges {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{name} = [{lo}, {hi}] must be a nonempty range within [0, 1]"));
            }
        }
        if self.ventricle_count.0 > self.ventricle_count.1 {
            return bad(format!("ventricle_count = {:?} is empty", self.ventricle_count));
        }
        if !(0.0..=0.5).contains(&self.center_jitter) {
            return bad(format!("center_jitter {} must lie in [0, 0.5]", self.center_jitter));
        }
        for (axis, &frac) in self.head_semi_axes.iter().enumerate() {
            if frac <= 0.0 || frac + self.center_jitter > 0.5 {
                return bad(format!(
                    "head semi-axis {frac} plus centre jitter {} on axis {axis} does not fit inside the volume",
                    self.center_jitter
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.bias_amplitude) || !(0.0..=1.0).contains(&self.noise_sigma) {
            return bad("bias_amplitude and noise_sigma must lie in [0, 1]".into());
        }
        if !(self.edge_softness >= 0.0 && self.edge_softness.is_finite()) {
            return bad(format!("edge_softness {} must be finite and nonnegative", self.edge_softness));
        }
        Ok(())
    }

    /// Lowest and highest base tissue intensity any structure can take.
    pub fn intensity_band(&self) -> Range {
        let lows = [self.tissue_intensity.0, self.cortex_intensity.0, self.ventricle_intensity.0];
        let highs = [self.tissue_intensity.1, self.cortex_intensity.1, self.ventricle_intensity.1];
        (lows.into_iter().fold(1.0, f64::min), highs.into_iter().fold(0.0, f64::max))
    }

    fn voxels(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub count: (usize, usize),
    /// Ball radius in voxels, inclusive range.
    pub radius: (usize, usize),
    /// Additive hyperintensity, inclusive range.
    pub delta: Range,
    /// Every voxel within `radius + margin` of the centre must be brain.
    pub margin: usize,
    /// Preferred lesion centres as fractions of each extent. Empty means
    /// anywhere inside the brain.
    #[serde(default)]
    pub sites: Vec<[f64; 3]>,
    /// Largest per-axis offset, in voxels, of a centre from its site.
    #[serde(default)]
    pub site_jitter: usize,
}

impl LesionSpec {
    pub fn desk() -> Self {
        Self {
            count: (1, 1),
            radius: (3, 4),
            delta: (0.3, 0.45),
            margin: 1,
            sites: Vec::new(),
            site_jitter: 0,
        }
    }

    /// Lesions sized for the 64 x 77 x 66 grid.
    pub fn paper() -> Self {
        Self {
            radius: (10, 14),
            margin: 3,
            ..Self::desk()
        }
    }

    /// Checks the spec on its own. [`LesionSpec::validate_for`] additionally
    /// requires lesions to stand out of the phantom noise.
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidLesion(m));
        if self.count.0 == 0 || self.count.0 > self.count.1 {
            return bad(format!("count = {:?} must be a nonempty range starting at 1 or more", self.count));
        }
        if self.radius.0 == 0 || self.radius.0 > self.radius.1 {
            return bad(format!("radius = {:?} must be a nonempty range starting at 1 or more", self.radius));
        }
        let (lo, hi) = self.delta;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("delta = [{lo}, {hi}] must be a nonempty range within (0, 1]"));
        }
        if let Some(site) = self.sites.iter().find(|s| s.iter().any(|f| !(0.0..=1.0).contains(f))) {
            return bad(format!("site {site:?} must lie within [0, 1] on every axis"));
        }
        Ok(())
    }

    pub fn validate_for(&self, phantom: &PhantomSpec) -> Result<(), PhantomError> {
        self.validate()?;
        if self.delta.0 <= phantom.noise_sigma {
            return Err(PhantomError::InvalidLesion(format!(
                "minimum delta {} must exceed the phantom noise sigma {}",
                self.delta.0, phantom.noise_sigma
            )));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radius; `<= 1` means inside.
    fn radius(&self, v: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((v[a] - self.center[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Fraction of the voxel at `v` inside the surface scaled by `shell`,
    /// ramping linearly over `softness` voxels across the boundary.
    fn membership(&self, v: [f64; 3], shell: f64, softness: f64) -> f64 {
        let r = self.radius(v);
        if softness == 0.0 {
            return if r <= shell { 1.0 } else { 0.0 };
        }
        let mean_semi = self.semi.iter().sum::<f64>() / 3.0;
        (0.5 - (r - shell) * mean_semi / softness).clamp(0.0, 1.0)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Deterministic healthy phantom for `(seed, spec)`.
pub fn generate_healthy(seed: u64, spec: &PhantomSpec) -> Result<Sample, PhantomError> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let [d, h, w] = spec.shape;

    let scale = uniform(&mut rng, spec.head_scale);
    let mut head = Ellipsoid {
        center: [0.0; 3],
        semi: [0.0; 3],
    };
    for a in 0..3 {
        let extent = spec.shape[a] as f64;
        let jitter = uniform(&mut rng, (-spec.center_jitter, spec.center_jitter));
        head.center[a] = (extent - 1.0) / 2.0 + jitter * extent;
        head.semi[a] = spec.head_semi_axes[a] * extent * scale;
    }
    let cortex_inner = 1.0 - uniform(&mut rng, spec.cortex_thickness);

    let n_ventricles = rng.random_range(spec.ventricle_count.0..=spec.ventricle_count.1);
    let ventricles: Vec<Ellipsoid> = (0..n_ventricles)
        .map(|_| {
            let mut e = Ellipsoid {
                center: [0.0; 3],
                semi: [0.0; 3],
            };
            for a in 0..3 {
                let offset = uniform(&mut rng, (-0.25, 0.25));
                e.center[a] = head.center[a] + offset * head.semi[a];
                e.semi[a] = (uniform(&mut rng, spec.ventricle_size) * head.semi[a]).max(0.5);
            }
            e
        })
        .collect();

    let tissue = uniform(&mut rng, spec.tissue_intensity);
    let cortex = uniform(&mut rng, spec.cortex_intensity);
    let csf = uniform(&mut rng, spec.ventricle_intensity);
    let phases: [f64; 3] = std::array::from_fn(|_| uniform(&mut rng, (0.0, std::f64::consts::TAU)));
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma validated"));

    let mut data = Vec::with_capacity(spec.voxels());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = [z as f64, y as f64, x as f64];
                let soft = spec.edge_softness;
                let in_head = head.membership(v, 1.0, soft);
                if in_head == 0.0 {
                    data.push(0.0f32);
                    continue;
                }
                let in_core = head.membership(v, cortex_inner, soft);
                let in_csf = ventricles.iter().map(|e| e.membership(v, 1.0, soft)).fold(0.0, f64::max);
                let core = in_csf * csf + (1.0 - in_csf) * tissue;
                let base = in_head * (in_core * core + (1.0 - in_core) * cortex);
                let bias = if spec.bias_amplitude > 0.0 {
                    let wave: f64 = (0..3)
                        .map(|a| (std::f64::consts::TAU * v[a] / spec.shape[a] as f64 + phases[a]).sin())
                        .sum();
                    1.0 + spec.bias_amplitude * wave / 3.0
                } else {
                    1.0
                };
                let mut value = base * bias;
                if let Some(noise) = &noise {
                    value += noise.sample(&mut rng);
                }
                data.push(value.clamp(0.0, 1.0) as f32);
            }
        }
    }

    Ok(Sample {
        id: format!("phantom-{seed:016x}"),
        volume: Tensor::from_vec(spec.shape.to_vec(), data).expect("shape validated"),
        label: Label::Healthy,
        lesion_mask: None,
        source: Source::Generated,
        seed,
    })
}

/// Voxels with nonzero intensity.
pub fn brain_mask(volume: &Volume) -> Vec<bool> {
    volume.data().iter().map(|&v| v > 0.0).collect()
}

/// Adds hyperintense balls at feasible sites inside the brain.
///
/// Every voxel inside the returned mask received at least `delta.0` before
/// clamping; every voxel outside it is bit-identical to the input.
pub fn inject_lesion(sample: &Sample, seed: u64, spec: &LesionSpec) -> Result<Sample, PhantomError> {
    spec.validate()?;
    if sample.label != Label::Healthy {
        return Err(PhantomError::NotHealthy(sample.id.clone()));
    }
    let shape = sample.volume.shape();
    if shape.len() != 3 {
        return Err(PhantomError::InvalidDataset(format!("sample `{}` is not a 3D volume", sample.id)));
    }
    let dims = [shape[0], shape[1], shape[2]];
    let brain = brain_mask(&sample.volume);
    let mut rng = rng_from_seed(seed);

    let mut added = vec![0.0f64; brain.len()];
    let n_lesions = rng.random_range(spec.count.0..=spec.count.1);
    for _ in 0..n_lesions {
        let radius = rng.random_range(spec.radius.0..=spec.radius.1);
        let delta = uniform(&mut rng, spec.delta);
        let clearance = ball_offsets(radius + spec.margin);
        let candidates = site_candidates(&mut rng, &brain, dims, spec);
        let center = pick_site(&mut rng, &candidates, &brain, dims, &clearance).ok_or_else(|| PhantomError::PlacementInfeasible {
            id: sample.id.clone(),
            radius,
            margin: spec.margin,
        })?;
        for off in ball_offsets(radius) {
            let v = offset_index(center, off, dims).expect("ball lies inside the clearance region");
            added[v] += delta;
        }
    }

    let mut volume = sample.volume.clone();
    let mut mask = vec![0.0f32; brain.len()];
    for ((value, m), &a) in volume.data_mut().iter_mut().zip(&mut mask).zip(&added) {
        if a > 0.0 {
            *value = (*value as f64 + a).clamp(0.0, 1.0) as f32;
            *m = 1.0;
        }
    }

    Ok(Sample {
        id: sample.id.clone(),
        volume,
        label: Label::Unhealthy,
        lesion_mask: Some(Tensor::from_vec(shape.to_vec(), mask).expect("same shape")),
        source: Source::Injected,
        seed: sample.seed,
    })
}

/// Healthy phantom for `seed`, with lesions injected when `label` is
/// unhealthy. The lesion seed is derived from `seed`, so the pair
/// `(seed, label)` fully determines the sample.
pub fn generate_sample(
    seed: u64,
    label: Label,
    phantom: &PhantomSpec,
    lesion: &LesionSpec,
) -> Result<Sample, PhantomError> {
    let healthy = generate_healthy(seed, phantom)?;
    match label {
        Label::Healthy => Ok(healthy),
        Label::Unhealthy => inject_lesion(&healthy, derive_seed(seed, LESION_STREAM, 0), lesion),
    }
}

/// Integer lattice offsets with Euclidean norm `<= radius`, outermost first.
pub fn ball_offsets(radius: usize) -> Vec<[i64; 3]> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dz * dz + dy * dy + dx * dx <= r * r {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out.sort_by_key(|o| std::cmp::Reverse(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]));
    out
}

fn offset_index(center: [usize; 3], off: [i64; 3], dims: [usize; 3]) -> Option<usize> {
    let mut idx = 0usize;
    for a in 0..3 {
        let c = center[a] as i64 + off[a];
        if c < 0 || c >= dims[a] as i64 {
            return None;
        }
        idx = idx * dims[a] + c as usize;
    }
    Some(idx)
}

fn unravel(idx: usize, dims: [usize; 3]) -> [usize; 3] {
    [idx / (dims[1] * dims[2]), (idx / dims[2]) % dims[1], idx % dims[2]]
}

fn site_fits(center: [usize; 3], brain: &[bool], dims: [usize; 3], clearance: &[[i64; 3]]) -> bool {
    clearance
        .iter()
        .all(|&off| offset_index(center, off, dims).is_some_and(|i| brain[i]))
}

/// Uniform draw among feasible lesion centres. A few rejection-sampled
/// attempts are tried first; an exhaustive scan settles the rest.
/// Brain voxels eligible as a lesion centre: all of them, or those in the
/// jitter box around one randomly chosen preferred site.
fn site_candidates(rng: &mut impl Rng, brain: &[bool], dims: [usize; 3], spec: &LesionSpec) -> Vec<usize> {
    let inside = (0..brain.len()).filter(|&i| brain[i]);
    if spec.sites.is_empty() {
        return inside.collect();
    }
    let site = spec.sites[rng.random_range(0..spec.sites.len())];
    let anchor: [i64; 3] = std::array::from_fn(|a| (site[a] * (dims[a] - 1) as f64).round() as i64);
    let j = spec.site_jitter as i64;
    inside
        .filter(|&i| {
            let c = unravel(i, dims);
            (0..3).all(|a| (c[a] as i64 - anchor[a]).abs() <= j)
        })
        .collect()
}

fn pick_site(
    rng: &mut impl Rng,
    inside: &[usize],
    brain: &[bool],
    dims: [usize; 3],
    clearance: &[[i64; 3]],
) -> Option<[usize; 3]> {
    if inside.is_empty() {
        return None;
    }
    for _ in 0..64 {
        let c = unravel(inside[rng.random_range(0..inside.len())], dims);
        if site_fits(c, brain, dims, clearance) {
            return Some(c);
        }
    }
    let feasible: Vec<[usize; 3]> = inside
        .iter()
        .map(|&i| unravel(i, dims))
        .filter(|&c| site_fits(c, brain, dims, clearance))
        .collect();
    (!feasible.is_empty()).then(|| feasible[rng.random_range(0..feasible.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn noiseless() -> PhantomSpec {
        PhantomSpec {
            bias_amplitude: 0.0,
            noise_sigma: 0.0,
            ..PhantomSpec::desk()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::desk();
        let a = generate_healthy(42, &spec).unwrap();
        let b = generate_healthy(42, &spec).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.volume, generate_healthy(43, &spec).unwrap().volume);
    }

    #[test]
    fn noiseless_phantom_is_piecewise_constant() {
        let s = generate_healthy(7, &noiseless()).unwrap();
        let distinct: BTreeSet<u32> = s.volume.data().iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 4, "{} distinct values", distinct.len());
        assert!(s.volume.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.label, Label::Healthy);
        assert!(s.lesion_mask.is_none());
    }

    #[test]
    fn invalid_phantom_specs_rejected() {
        let mut spec = PhantomSpec::desk();
        spec.head_semi_axes[1] = 0.49;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::desk();
        spec.tissue_intensity = (0.8, 0.6);
        assert!(generate_healthy(0, &spec).is_err());
        let mut spec = PhantomSpec::desk();
        spec.cortex_intensity = (0.2, 1.2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn radius_two_ball_has_33_voxels() {
        assert_eq!(ball_offsets(2).len(), 33);
        assert_eq!(ball_offsets(1).len(), 7);
        assert_eq!(ball_offsets(0).len(), 1);
    }

    #[test]
    fn single_radius_two_lesion_marks_ball_and_nothing_else() {
        let healthy = generate_healthy(3, &PhantomSpec::desk()).unwrap();
        let spec = LesionSpec {
            count: (1, 1),
            radius: (2, 2),
            delta: (0.3, 0.3),
            margin: 1,
            ..LesionSpec::desk()
        };
        let sick = inject_lesion(&healthy, 11, &spec).unwrap();
        let mask = sick.lesion_mask.as_ref().unwrap();
        assert_eq!(mask.data().iter().filter(|&&m| m == 1.0).count(), 33);
        for ((&before, &after), &m) in healthy.volume.data().iter().zip(sick.volume.data()).zip(mask.data()) {
            if m == 0.0 {
                assert_eq!(before.to_bits(), after.to_bits());
            } else {
                assert!(before > 0.0, "lesion voxel outside brain");
                let expected = (before as f64 + 0.3).min(1.0) as f32;
                assert_eq!(after, expected);
            }
        }
        assert_eq!(sick.label, Label::Unhealthy);
        assert_eq!(sick.source, Source::Injected);
    }

    #[test]
    fn degenerate_lesion_specs_rejected() {
        let mut spec = LesionSpec::desk();
        spec.delta = (0.0, 0.0);
        assert!(matches!(spec.validate(), Err(PhantomError::InvalidLesion(_))));
        let mut spec = LesionSpec::desk();
        spec.delta = (0.01, 0.02);
        assert!(spec.validate().is_ok());
        assert!(spec.validate_for(&PhantomSpec::desk()).is_err());
        spec.radius = (0, 2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn infeasible_lesion_is_an_error_not_a_shrink() {
        let healthy = generate_healthy(3, &PhantomSpec::desk()).unwrap();
        let spec = LesionSpec {
            count: (1, 1),
            radius: (7, 7),
            delta: (0.3, 0.3),
            margin: 1,
            ..LesionSpec::desk()
        };
        assert!(matches!(
            inject_lesion(&healthy, 1, &spec),
            Err(PhantomError::PlacementInfeasible { radius: 7, .. })
        ));
    }

    #[test]
    fn unhealthy_input_rejected() {
        let healthy = generate_healthy(3, &PhantomSpec::desk()).unwrap();
        let sick = inject_lesion(&healthy, 1, &LesionSpec::desk()).unwrap();
        assert!(matches!(inject_lesion(&sick, 2, &LesionSpec::desk()), Err(PhantomError::NotHealthy(_))));
    }

    #[test]
    fn lesions_raise_masked_intensity() {
        let phantom = PhantomSpec::desk();
        let lesion = LesionSpec::desk();
        for seed in 0..20 {
            let healthy = generate_healthy(seed, &phantom).unwrap();
            let sick = generate_sample(seed, Label::Unhealthy, &phantom, &lesion).unwrap();
            let mask = sick.lesion_mask.as_ref().unwrap();
            let (mut before, mut after, mut n) = (0.0f64, 0.0f64, 0usize);
            for i in 0..mask.len() {
                if mask.data()[i] == 1.0 {
                    before += healthy.volume.data()[i] as f64;
                    after += sick.volume.data()[i] as f64;
                    n += 1;
                }
            }
            assert!(n > 0);
            assert!(after / n as f64 > before / n as f64);
        }
    }

    #[test]
    fn soft_edges_ramp_between_background_and_tissue() {
        let spec = PhantomSpec {
            edge_softness: 2.0,
            ..noiseless()
        };
        let hard = generate_healthy(5, &noiseless()).unwrap();
        let soft = generate_healthy(5, &spec).unwrap();
        let distinct = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<BTreeSet<_>>().len();
        assert!(distinct(&soft.volume) > distinct(&hard.volume));
        // Along the central row the ramp rises monotonically from zero.
        let row: Vec<f32> = (0..8).map(|x| soft.volume.data()[(8 * 16 + 8) * 16 + x]).collect();
        assert_eq!(row[0], 0.0);
        assert!(row.windows(2).take(4).all(|w| w[0] <= w[1]), "{row:?}");
        assert!(row.iter().any(|&v| v > 0.0 && v < 0.3), "{row:?}");
    }

    #[test]
    fn preferred_sites_bound_lesion_centres() {
        let healthy = generate_healthy(9, &PhantomSpec::desk()).unwrap();
        let spec = LesionSpec {
            radius: (2, 2),
            margin: 0,
            sites: vec![[0.5, 0.5, 0.5]],
            site_jitter: 1,
            ..LesionSpec::desk()
        };
        for seed in 0..10 {
            let sick = inject_lesion(&healthy, seed, &spec).unwrap();
            let mask = sick.lesion_mask.unwrap();
            let voxels: Vec<[usize; 3]> = (0..mask.len()).filter(|&i| mask.data()[i] == 1.0).map(|i| unravel(i, [16; 3])).collect();
            assert_eq!(voxels.len(), 33);
            let centre: [f64; 3] = std::array::from_fn(|a| voxels.iter().map(|v| v[a] as f64).sum::<f64>() / 33.0);
            assert!(centre.iter().all(|&c| (c - 7.5).abs() <= 1.5), "{centre:?}");
        }
        let bad = LesionSpec {
            sites: vec![[1.5, 0.5, 0.5]],
            ..LesionSpec::desk()
        };
        assert!(bad.validate().is_err());
    }
}
