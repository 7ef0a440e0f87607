//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AUATTN"  version:u8
//! meta_len:u32  meta:[u8; meta_len]        (JSON)
//! count:u32
//! count x { name_len:u32 name:[u8] rank:u32 dims:[u32; rank] data:[f32; prod(dims)] }
//! ```
//!
//! Tensors are the model parameters under their own names (running batch
//! norm statistics included) followed by the Adam moments as `adam.m.<name>`
//! and `adam.v.<name>` for every learnable tensor.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, OptimizerState};
use super::{EpochLog, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"AUATTN";
pub const VERSION: u8 = 1;

/// Everything needed to evaluate a model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub au_names: Vec<String>,
    /// Completed epochs; training resumes at this epoch index.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model_config: ModelConfig,
    train_config: TrainConfig,
    au_names: Vec<String>,
    epoch: usize,
    log: Vec<EpochLog>,
    adam: AdamConfig,
    adam_step: u64,
    /// The batch order of an epoch is a pure function of these two values.
    shuffle_seed: u64,
    next_epoch: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            au_names: self.au_names.clone(),
            epoch: self.epoch,
            log: self.log.clone(),
            adam: self.optimizer.config,
            adam_step: self.optimizer.step,
            shuffle_seed: self.train_config.seed,
            next_epoch: self.epoch as u64,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Config(format!("serializing metadata: {e}")))?;

        let named = self.params.named();
        let trainable = self.params.trainable_names();
        let mut tensors: Vec<(String, &Tensor<f32>)> = named;
        for (prefix, moments) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for (name, t) in trainable.iter().zip(moments) {
                tensors.push((format!("{prefix}{name}"), t));
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&u32_len(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(t.rank())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d)?.to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version} (expected {VERSION})")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| corrupt(format!("metadata: {e}")))?;
        meta.model_config
            .validate()
            .map_err(|e| corrupt(format!("model configuration: {e}")))?;

        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str, like: &Tensor<f32>| -> Result<Tensor<f32>> {
            let t = tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(corrupt(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };

        let mut params = ModelParams::<f32>::init(&meta.model_config, 0)?;
        for (name, slot) in params.named_mut() {
            *slot = take(&name, slot)?;
        }
        let mut optimizer = OptimizerState::new(params.trainable(), meta.adam);
        optimizer.step = meta.adam_step;
        let names = params.trainable_names();
        for (prefix, moments) in [("adam.m.", &mut optimizer.m), ("adam.v.", &mut optimizer.v)] {
            for (name, slot) in names.iter().zip(moments.iter_mut()) {
                *slot = take(&format!("{prefix}{name}"), slot)?;
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        if meta.next_epoch != meta.epoch as u64 || meta.shuffle_seed != meta.train_config.seed {
            return Err(corrupt("inconsistent resume state"));
        }

        Ok(Checkpoint {
            model_config: meta.model_config,
            train_config: meta.train_config,
            au_names: meta.au_names,
            epoch: meta.epoch,
            log: meta.log,
            params,
            optimizer,
        })
    }
}

/// Writes to a temporary sibling first so a crash never leaves a torn file.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn corrupt(message: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(message.into())
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.bytes.len())))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
