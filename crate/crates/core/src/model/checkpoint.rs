//! Checkpoint layout, little-endian:
//!
//! ```text
//! "AECK"  u32 version  u32 config_len  config (JSON)  u64 init_seed  u32 blocks
//! per block: u16 name_len  name  u8 rank  u32 extents[rank]  f32 data[..]
//! ```

use std::path::Path;

use super::{AeConfig, AeModel, ModelError};
use crate::tensor::{ParamBlock, Tensor};

const MAGIC: &[u8; 4] = b"AECK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &AeModel<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&model.init_seed().to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ModelError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AeModel<f32>, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic, expected \"AECK\"".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let config: AeConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let init_seed = r.u64()?;
    let blocks = r.u32()? as usize;
    let mut params = Vec::with_capacity(blocks.min(1024));
    for _ in 0..blocks {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("block name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ModelError::Checkpoint(format!("block `{name}` is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(ParamBlock {
            value: Tensor::from_vec(shape, data).map_err(|e| ModelError::Checkpoint(format!("block `{name}`: {e}")))?,
            name,
        });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    AeModel::from_parts(config, params, init_seed)
}

pub fn save_checkpoint(model: &AeModel<f32>, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<AeModel<f32>, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = init_model::<f32>(&AeConfig::desk()).unwrap().reinitialize(17);
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let model = init_model::<f32>(&AeConfig::desk()).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut long = bytes;
        long.push(1);
        assert!(decode_checkpoint(&long).is_err());
    }
}
