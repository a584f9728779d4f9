//! `MILCKPT1` checkpoints.
//!
//! Layout: the 8-byte magic `MILCKPT1`, the header length as a little-endian
//! u64, a JSON header, then every parameter as little-endian f32 in header
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bagsynth::store::{decode_f32, encode_f32};
use crate::error::{Error, Result};
use crate::metrics::FoldMetrics;
use crate::model::{Model, ModelSpec};

pub const MAGIC: &[u8; 8] = b"MILCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    /// Optimizer steps taken when saved.
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub metrics: Option<FoldMetrics>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, step: u64) -> Self {
        let header = CheckpointHeader {
            spec: model.spec().clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            step,
            seed: model.params().seed(),
            fold: None,
            metrics: None,
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.model.params().count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.model.params().iter() {
            out.extend(encode_f32(p.tensor.data()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("missing MILCKPT1 magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(err(format!("header of {len} bytes overruns a {}-byte file", bytes.len())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
        let payload = decode_f32(&body[len..])?;
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected {
            return Err(err(format!("payload holds {} values, header describes {expected}", payload.len())));
        }
        let mut model = Model::<f32>::new(&header.spec, header.seed)?;
        if model.params().len() != header.tensors.len() {
            return Err(err(format!("header lists {} tensors, model has {}", header.tensors.len(), model.params().len())));
        }
        let mut offset = 0;
        for (entry, p) in header.tensors.iter().zip(model.params_mut().iter_mut()) {
            if entry.name != p.name || entry.shape != p.tensor.shape() {
                return Err(err(format!("tensor {} {:?} does not match model tensor {} {:?}", entry.name, entry.shape, p.name, p.tensor.shape())));
            }
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&payload[offset..offset + n]);
            offset += n;
        }
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
