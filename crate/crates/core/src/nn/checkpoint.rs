//! Checkpoint files: one line of JSON metadata, a newline, then raw
//! little-endian tensor payloads (parameters, then optional Adam moments)
//! in the order the metadata declares.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AttDiCnn, Block, ModelConfig};
use super::optim::{Adam, AdamHyper};
use super::{DType, Scalar};
use crate::error::{Error, Result};

const FORMAT: &str = "vgsleep-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub block: Block,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub hyper: AdamHyper,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: DType,
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub param_count: usize,
    pub seed: u64,
    pub epoch: usize,
    /// Validation accuracy of the stored weights, when known.
    pub metric: Option<f64>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: Vec<T>,
    pub optimizer: Option<Adam<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: &AttDiCnn<T>, class_names: Vec<String>, seed: u64, epoch: usize, metric: Option<f64>) -> Self {
        let tensors = model
            .specs()
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                block: s.block,
                shape: s.shape.clone(),
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                format: FORMAT.into(),
                dtype: T::DTYPE,
                config: model.config().clone(),
                class_names,
                param_count: model.param_count(),
                seed,
                epoch,
                metric,
                tensors,
                optimizer: None,
            },
            params: model.params().to_vec(),
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, adam: Adam<T>) -> Self {
        self.meta.optimizer = Some(OptimizerMeta {
            hyper: adam.hyper,
            step: adam.step,
        });
        self.optimizer = Some(adam);
        self
    }

    pub fn model(&self) -> Result<AttDiCnn<T>> {
        let model = AttDiCnn::from_params(self.meta.config.clone(), self.params.clone())?;
        let layout_matches = model.specs().len() == self.meta.tensors.len()
            && model
                .specs()
                .iter()
                .zip(&self.meta.tensors)
                .all(|(s, t)| s.name == t.name && s.shape == t.shape);
        if !layout_matches {
            return Err(Error::Checkpoint("tensor list does not match the stored model config".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.meta)?;
        out.push(b'\n');
        out.reserve(self.params.len() * 3 * T::BYTES);
        for &v in &self.params {
            v.write_le(&mut out);
        }
        if let Some(adam) = &self.optimizer {
            for &v in adam.m.iter().chain(&adam.v) {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Payloads stored in either precision are converted to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing metadata line".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[..nl])?;
        if meta.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", meta.format)));
        }
        let width = match meta.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let n = meta.param_count;
        let declared: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if declared != n {
            return Err(Error::Checkpoint(format!("tensor shapes cover {declared} values, param_count is {n}")));
        }
        let blocks = if meta.optimizer.is_some() { 3 } else { 1 };
        let payload = &bytes[nl + 1..];
        if payload.len() != blocks * n * width {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                blocks * n * width
            )));
        }
        let decode = |chunk: &[u8]| -> T {
            match meta.dtype {
                DType::F32 => T::of(f32::read_le(chunk) as f64),
                DType::F64 => T::of(f64::read_le(chunk)),
            }
        };
        let mut values = payload.chunks_exact(width).map(decode);
        let params: Vec<T> = values.by_ref().take(n).collect();
        let optimizer = meta.optimizer.as_ref().map(|o| Adam {
            hyper: o.hyper,
            step: o.step,
            m: values.by_ref().take(n).collect(),
            v: values.by_ref().take(n).collect(),
        });
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Flattened values of every tensor tagged with `block`, with tensor names.
    pub fn block_values(&self, block: Block) -> Vec<(&str, T)> {
        let mut offset = 0;
        let mut out = Vec::new();
        for t in &self.meta.tensors {
            let len: usize = t.shape.iter().product();
            if t.block == block {
                out.extend(self.params[offset..offset + len].iter().map(|&v| (t.name.as_str(), v)));
            }
            offset += len;
        }
        out
    }
}
