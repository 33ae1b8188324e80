//! Self-describing checkpoint container.
//!
//! Layout: the magic `STLM1`, a little-endian `u64` header length, a UTF-8
//! JSON header (configs, iteration, merge table, tensor directory), then the
//! raw little-endian `f32` payloads at the offsets named in the directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::train::{TrainConfig, Trainer};
use crate::bytepool::BytePoolConfig;
use crate::error::{file_err, Error, Result};
use crate::model::{LanguageModel, ModelConfig};
use crate::tokenizer::MergeTable;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STLM1";
const MOMENT_M: &str = "optimizer.m.";
const MOMENT_V: &str = "optimizer.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub bytepool: Option<BytePoolConfig>,
    pub train: TrainConfig,
    pub iteration: usize,
    pub merges: MergeTable,
    /// Parameters by canonical name, then optimizer moments when present.
    pub tensors: Vec<TensorRecord>,
    /// `(alias, canonical)` pairs for tied parameters.
    pub aliases: Vec<(String, String)>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    dtype: String,
    dims: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    bytepool: Option<BytePoolConfig>,
    train: TrainConfig,
    iteration: usize,
    merges: String,
    tensors: Vec<DirEntry>,
    aliases: Vec<(String, String)>,
    optimizer: Option<OptimizerState>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    /// Weights only, without optimizer state.
    pub fn from_model(model: &LanguageModel<f32>, merges: &MergeTable, train: &TrainConfig, iteration: usize) -> Self {
        let store = model.params();
        let tensors = store
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                dims: e.tensor.shape().to_vec(),
                values: e.tensor.values().to_vec(),
            })
            .collect();
        let aliases = store
            .names()
            .iter()
            .filter_map(|(name, id)| {
                let canonical = &store.entry(*id).name;
                (canonical != name).then(|| (name.clone(), canonical.clone()))
            })
            .collect();
        Self {
            model: model.config().clone(),
            bytepool: model.bytepool_config().cloned(),
            train: train.clone(),
            iteration,
            merges: merges.clone(),
            tensors,
            aliases,
            optimizer: None,
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        let mut ck = Self::from_model(&t.model, &t.merges, &t.config, t.iteration);
        let opt = &t.optimizer;
        let entries = t.model.params().entries();
        for (prefix, moments) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
            for (e, values) in entries.iter().zip(moments) {
                ck.tensors.push(TensorRecord {
                    name: format!("{prefix}{}", e.name),
                    dims: e.tensor.shape().to_vec(),
                    values: values.clone(),
                });
            }
        }
        ck.optimizer = Some(OptimizerState {
            step: opt.step,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
        });
        ck
    }

    fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies stored weights into `model`, failing on the first missing or
    /// differently shaped tensor.
    pub fn load_into(&self, model: &mut LanguageModel<f32>) -> Result<()> {
        for entry in model.params_mut().entries_mut() {
            let rec = self
                .tensor(&entry.name)
                .ok_or_else(|| format_err(format!("checkpoint has no tensor {}", entry.name)))?;
            if rec.dims != entry.tensor.shape() {
                return Err(format_err(format!(
                    "tensor {}: checkpoint has shape {:?}, model expects {:?}; check the model config",
                    entry.name,
                    rec.dims,
                    entry.tensor.shape()
                )));
            }
            entry.tensor.values_mut().copy_from_slice(&rec.values);
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config and loads its weights.
    pub fn build_model(&self) -> Result<LanguageModel<f32>> {
        let mut model = LanguageModel::new(self.model.clone(), self.bytepool.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Restores the full training state, including optimizer moments.
    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.build_model()?;
        let mut trainer = Trainer::new(model, self.merges.clone(), self.train.clone())?;
        trainer.iteration = self.iteration;
        if let Some(state) = &self.optimizer {
            let mut opt = AdamW::new(trainer.model.params(), state.beta1, state.beta2, state.eps, state.weight_decay);
            opt.step = state.step;
            for (i, e) in trainer.model.params().entries().iter().enumerate() {
                for (prefix, dst) in [(MOMENT_M, &mut opt.m[i]), (MOMENT_V, &mut opt.v[i])] {
                    let name = format!("{prefix}{}", e.name);
                    let rec = self
                        .tensor(&name)
                        .ok_or_else(|| format_err(format!("checkpoint has no tensor {name}")))?;
                    if rec.values.len() != dst.len() {
                        return Err(format_err(format!("tensor {name} has {} values, expected {}", rec.values.len(), dst.len())));
                    }
                    dst.copy_from_slice(&rec.values);
                }
            }
            trainer.optimizer = opt;
        }
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = DirEntry {
                    name: t.name.clone(),
                    dtype: "f32".into(),
                    dims: t.dims.clone(),
                    offset,
                };
                offset += 4 * t.values.len() as u64;
                e
            })
            .collect();
        let header = Header {
            model: self.model.clone(),
            bytepool: self.bytepool.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            merges: self.merges.to_text(),
            tensors,
            aliases: self.aliases.clone(),
            optimizer: self.optimizer.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != b"STLM" {
            return Err(format_err("not a checkpoint (missing STLM magic)"));
        }
        if &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(format_err(format!(
                "unsupported checkpoint version {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..5]),
                "STLM1"
            )));
        }
        let len_bytes: [u8; 8] = bytes
            .get(5..13)
            .ok_or_else(|| format_err("truncated checkpoint header"))?
            .try_into()
            .expect("slice of 8");
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes
            .get(13..13usize.saturating_add(header_len))
            .ok_or_else(|| format_err("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format_err(format!("bad checkpoint header: {e}")))?;
        let payload = &bytes[13 + header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for d in &header.tensors {
            if d.dtype != "f32" {
                return Err(format_err(format!("tensor {} has unsupported dtype {}", d.name, d.dtype)));
            }
            let n: usize = d.dims.iter().product();
            let start = d.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| format_err(format!("truncated checkpoint: tensor {} is incomplete", d.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            tensors.push(TensorRecord {
                name: d.name.clone(),
                dims: d.dims.clone(),
                values,
            });
        }
        Ok(Self {
            model: header.model,
            bytepool: header.bytepool,
            train: header.train,
            iteration: header.iteration,
            merges: MergeTable::from_text(&header.merges)?,
            tensors,
            aliases: header.aliases,
            optimizer: header.optimizer,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(file_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(file_err(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(file_err(path))?)
    }
}
