//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0        8 bytes   magic "CGNNCKPT"
//! offset 8        u32       format version (1)
//! offset 12       u64       header length H in bytes
//! offset 20       H bytes   UTF-8 JSON header
//! offset 20 + H             tensor data, f64 little-endian, row-major
//! ```
//!
//! The header holds the model config, training metadata and a tensor table
//! of `{name, kind, rows, cols, offset}` where `offset` counts bytes from the
//! start of the data section and `kind` is `param` or `buffer`. Saving the
//! same model twice produces identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, NamedTensor};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numcore::Tensor2;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGNNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub train_seed: u64,
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorKind {
    Param,
    Buffer,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

impl ModelCheckpoint {
    pub fn new(model: Model, metadata: TrainingMetadata) -> Self {
        ModelCheckpoint { model, metadata }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let tagged = self
            .model
            .params()
            .iter()
            .map(|t| (TensorKind::Param, t))
            .chain(self.model.buffers().iter().map(|t| (TensorKind::Buffer, t)));
        for (kind, t) in tagged {
            entries.push(TensorEntry {
                name: t.name.clone(),
                kind,
                rows: t.tensor.rows(),
                cols: t.tensor.cols(),
                offset: data.len(),
            });
            for v in t.tensor.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.model.config().clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < PREAMBLE || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_end = 0;
        for e in &header.tensors {
            let len = e.rows * e.cols * 8;
            let end = e.offset + len;
            if e.offset != expected_end || end > data.len() {
                return Err(fmt(&format!("tensor {:?} out of bounds", e.name)));
            }
            expected_end = end;
            let values = data[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor {
                name: e.name.clone(),
                tensor: Tensor2::from_vec(e.rows, e.cols, values)?,
            });
        }
        if expected_end != data.len() {
            return Err(fmt("trailing bytes after tensor data"));
        }
        let model = Model::from_tensors(header.config, tensors)?;
        Ok(ModelCheckpoint {
            model,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;

    fn sample() -> ModelCheckpoint {
        let model = Model::new(ModelConfig::preset(Architecture::GcnOptimised, 7, 11)).unwrap();
        ModelCheckpoint::new(
            model,
            TrainingMetadata {
                epochs: 3,
                best_epoch: 2,
                best_val_accuracy: Some(0.75),
                final_train_loss: Some(0.5),
                train_seed: 11,
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.model.buffers(), ck.model.buffers());
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(ModelCheckpoint::load(&p).unwrap().model.params(), ck.model.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bad).is_err());
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(ModelCheckpoint::from_bytes(&longer).is_err());
        assert!(ModelCheckpoint::from_bytes(&bytes[..10]).is_err());
    }
}
