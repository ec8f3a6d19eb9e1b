//! On-disk formats.
//!
//! `VOL1` volume file, little-endian throughout:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "VOL1"
//! 4       1         dtype tag (0 = f32)
//! 5       12        extents D, H, W as u32
//! 17      4*D*H*W   voxels, row-major (W fastest), f32
//! ```
//!
//! A saved bundle is a directory holding `manifest.csv` (`id,label,seed,path`),
//! `dataset.json` (impurity ratio) and one `.vol` per sample plus a
//! `.mask.vol` per unhealthy sample.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{DatasetBundle, ManifestEntry, Split};
use super::{Label, PhantomError, Sample, Source, Volume};
use crate::tensor::Tensor;

pub const VOL_MAGIC: &[u8; 4] = b"VOL1";
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum VolumeIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"VOL1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("truncated volume: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("volume dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { dims: [u32; 3] },
    #[error("volume dimensions {dims:?} contain a zero extent")]
    ZeroExtent { dims: [u32; 3] },
    #[error("{extra} unexpected trailing bytes after voxel data")]
    TrailingBytes { extra: u64 },
    #[error("cannot store a rank-{0} tensor as a volume")]
    NotAVolume(usize),
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolumeIoError + '_ {
    move |source| VolumeIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_volume(volume: &Volume) -> Result<Vec<u8>, VolumeIoError> {
    let shape = volume.shape();
    if shape.len() != 3 {
        return Err(VolumeIoError::NotAVolume(shape.len()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.len());
    out.extend_from_slice(VOL_MAGIC);
    out.push(DTYPE_F32);
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| VolumeIoError::DimensionOverflow {
            dims: [u32::MAX; 3],
        })?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, VolumeIoError> {
    if bytes.len() < 4 || &bytes[..4] != VOL_MAGIC {
        return Err(VolumeIoError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeIoError::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[4] != DTYPE_F32 {
        return Err(VolumeIoError::UnsupportedDtype(bytes[4]));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes"));
    let dims = [dim(0), dim(1), dim(2)];
    if dims.contains(&0) {
        return Err(VolumeIoError::ZeroExtent { dims });
    }
    let voxels = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(VolumeIoError::DimensionOverflow { dims })?;
    let actual = bytes.len() as u64;
    if actual < voxels {
        return Err(VolumeIoError::Truncated {
            expected: voxels,
            actual,
        });
    }
    if actual > voxels {
        return Err(VolumeIoError::TrailingBytes { extra: actual - voxels });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let shape = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::from_vec(shape, data).expect("validated extents"))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), VolumeIoError> {
    let bytes = encode_volume(volume)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeIoError> {
    decode_volume(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), VolumeIoError> {
    let manifest_err = |e: csv::Error| VolumeIoError::Manifest(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(manifest_err)?;
    for e in entries {
        w.serialize(e).map_err(manifest_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, VolumeIoError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| VolumeIoError::Manifest(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| VolumeIoError::Manifest(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "label", "seed", "path"] {
        return Err(VolumeIoError::Manifest(format!(
            "{}: expected header `id,label,seed,path`",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| VolumeIoError::Manifest(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    impurity_ratio: f64,
}

fn mask_path(volume_path: &str) -> String {
    match volume_path.strip_suffix(".vol") {
        Some(stem) => format!("{stem}.mask.vol"),
        None => format!("{volume_path}.mask"),
    }
}

/// Writes every sample and the manifest under `dir`; returns the manifest
/// with paths filled in (relative to `dir`).
pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<Vec<ManifestEntry>, PhantomError> {
    fs::create_dir_all(dir.join("volumes")).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(bundle.manifest.len());
    for sample in bundle.all_samples() {
        let rel = format!("volumes/{}.vol", sample.id);
        save_volume(&sample.volume, &dir.join(&rel))?;
        if let Some(mask) = &sample.lesion_mask {
            save_volume(mask, &dir.join(mask_path(&rel)))?;
        }
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            label: sample.label,
            seed: sample.seed,
            path: rel,
        });
    }
    write_manifest(&entries, &dir.join("manifest.csv"))?;
    let meta = serde_json::to_string_pretty(&BundleMeta {
        impurity_ratio: bundle.impurity_ratio,
    })
    .expect("plain struct");
    let meta_path = dir.join("dataset.json");
    fs::write(&meta_path, meta + "\n").map_err(io_err(&meta_path))?;
    Ok(entries)
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle, PhantomError> {
    let manifest = read_manifest(&dir.join("manifest.csv"))?;
    let meta_path = dir.join("dataset.json");
    let meta: BundleMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(io_err(&meta_path))?)
        .map_err(|e| VolumeIoError::Manifest(format!("{}: {e}", meta_path.display())))?;

    let mut bundle = DatasetBundle {
        train: Vec::new(),
        val: Vec::new(),
        test_healthy: Vec::new(),
        test_unhealthy: Vec::new(),
        impurity_ratio: meta.impurity_ratio,
        manifest: manifest.clone(),
    };
    for entry in &manifest {
        let split = Split::of_id(&entry.id)
            .ok_or_else(|| VolumeIoError::Manifest(format!("sample id `{}` does not name a split", entry.id)))?;
        if split.label() != entry.label {
            return Err(VolumeIoError::Manifest(format!("sample `{}` is labelled {} in split {split:?}", entry.id, entry.label)).into());
        }
        let volume = load_volume(&dir.join(&entry.path))?;
        let lesion_mask = match entry.label {
            Label::Unhealthy => Some(load_volume(&dir.join(mask_path(&entry.path)))?),
            Label::Healthy => None,
        };
        let sample = Sample {
            id: entry.id.clone(),
            volume,
            label: entry.label,
            lesion_mask,
            source: Source::File,
            seed: entry.seed,
        };
        match split {
            Split::TrainHealthy | Split::TrainInjected => bundle.train.push(sample),
            Split::Val => bundle.val.push(sample),
            Split::TestHealthy => bundle.test_healthy.push(sample),
            Split::TestUnhealthy => bundle.test_unhealthy.push(sample),
        }
    }
    Ok(bundle)
}
