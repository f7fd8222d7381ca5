//! Checkpoint file format.
//!
//! Layout: magic `FAGG`, version byte 1, a little-endian u32 length prefix,
//! a UTF-8 JSON metadata block (step, epoch, model spec, data dims, kept
//! labels, rng state, ordered tensor directory with shapes), then every
//! tensor's values as little-endian 64-bit floats in directory order.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor2D};

use super::label_filter::LabelFilter;
use super::model::{DataDims, Model, ModelSpec};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FAGG";
pub const CHECKPOINT_VERSION: u8 = 1;

/// A serialized model snapshot at a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub epoch: usize,
    pub spec: ModelSpec,
    pub dims: DataDims,
    pub kept_labels: Option<Vec<usize>>,
    pub rng_state: u64,
    /// Named parameter tensors in model order.
    pub tensors: Vec<(String, Tensor2D)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    step: u64,
    epoch: usize,
    spec: ModelSpec,
    dims: DataDims,
    kept_labels: Option<Vec<usize>>,
    rng_state: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, epoch: usize, rng_state: u64) -> Self {
        Checkpoint {
            step,
            epoch,
            spec: model.spec.clone(),
            dims: model.dims,
            kept_labels: model.filter.as_ref().map(|f| f.kept().to_vec()),
            rng_state,
            tensors: model
                .tensors()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model: shape from the spec, weights from the tensor
    /// directory. Names and shapes must match the spec-derived layout.
    pub fn to_model(&self) -> Result<Model> {
        let filter = self
            .kept_labels
            .as_ref()
            .map(|kept| LabelFilter::from_kept(kept.clone()))
            .transpose()?;
        let mut model = Model::init(&self.spec, self.dims, filter, &mut SeededRng::new(0))?;
        let targets = model.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, model wants {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, target), (stored_name, stored)) in targets.into_iter().zip(&self.tensors) {
            if &name != stored_name {
                return Err(Error::data(format!(
                    "checkpoint tensor {stored_name:?} where {name:?} was expected"
                )));
            }
            if target.shape() != stored.shape() {
                return Err(Error::data(format!(
                    "tensor {name:?} has shape {:?}, model wants {:?}",
                    stored.shape(),
                    target.shape()
                )));
            }
            target.values_mut().copy_from_slice(stored.values());
        }
        Ok(model)
    }
}

/// Writes a checkpoint file.
pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let meta = CheckpointMeta {
        step: cp.step,
        epoch: cp.epoch,
        spec: cp.spec.clone(),
        dims: cp.dims,
        kept_labels: cp.kept_labels.clone(),
        rng_state: cp.rng_state,
        tensors: cp
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let meta_len = u32::try_from(meta_bytes.len())
        .map_err(|_| Error::data("checkpoint metadata too large"))?;

    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&[CHECKPOINT_VERSION])?;
    out.write_all(&meta_len.to_le_bytes())?;
    out.write_all(&meta_bytes)?;
    for (_, tensor) in &cp.tensors {
        for v in tensor.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint file, refusing wrong magic, wrong version, or
/// truncated content; errors carry the offending byte offset.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut reader = BufReader::new(File::open(path.as_ref())?);
    let mut offset: u64 = 0;

    let mut magic = [0u8; 4];
    read_exact_at(&mut reader, &mut magic, &mut offset, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let mut version = [0u8; 1];
    read_exact_at(&mut reader, &mut version, &mut offset, "version")?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {}", version[0]),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_at(&mut reader, &mut len_bytes, &mut offset, "metadata length")?;
    let meta_len = u32::from_le_bytes(len_bytes) as usize;

    let meta_offset = offset;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_at(&mut reader, &mut meta_bytes, &mut offset, "metadata block")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format {
        offset: meta_offset,
        msg: format!("metadata is not valid json: {e}"),
    })?;

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    let mut buf = [0u8; 8];
    for entry in &meta.tensors {
        let count = entry.rows * entry.cols;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            read_exact_at(&mut reader, &mut buf, &mut offset, "tensor data")?;
            values.push(f64::from_le_bytes(buf));
        }
        let tensor_offset = offset - 8 * count as u64;
        let tensor = Tensor2D::from_values(entry.rows, entry.cols, values).map_err(|e| {
            Error::Format {
                offset: tensor_offset,
                msg: format!("tensor {:?}: {e}", entry.name),
            }
        })?;
        tensors.push((entry.name.clone(), tensor));
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format {
            offset,
            msg: "trailing bytes after last tensor".into(),
        });
    }

    Ok(Checkpoint {
        step: meta.step,
        epoch: meta.epoch,
        spec: meta.spec,
        dims: meta.dims,
        kept_labels: meta.kept_labels,
        rng_state: meta.rng_state,
        tensors,
    })
}

fn read_exact_at(
    reader: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<()> {
    reader.read_exact(buf).map_err(|_| Error::Format {
        offset: *offset,
        msg: format!("truncated while reading {what}"),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}
