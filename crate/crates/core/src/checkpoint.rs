//! Single-file checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"CTOCKPT\0"
//! version    u32       1
//! meta_len   u64
//! meta       JSON      CheckpointMeta
//! count      u64
//! count x    u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dim, f64 data
//! ```
//!
//! Entry names carry a kind prefix: `param/`, `buffer/`, `adam.m/`, `adam.v/`.
//! Values are always stored as f64, so an f32 model round-trips exactly.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CtoError, Result};
use crate::model::{CtoModel, ModelConfig};
use crate::nn::Module;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CTOCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub scalar: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: BTreeMap<String, Tensor<f64>>,
}

fn bad(msg: impl Into<String>) -> CtoError {
    CtoError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &CtoModel<T>, adam: &Adam<T>, train: &TrainConfig, epoch: usize) -> Self {
        let mut entries = BTreeMap::new();
        model.visit_params(&mut |p| {
            entries.insert(format!("param/{}", p.name()), p.value().cast());
        });
        model.visit_buffers(&mut |name, b| {
            entries.insert(format!("buffer/{name}"), b.cast());
        });
        for (name, m) in &adam.first {
            entries.insert(format!("adam.m/{name}"), m.cast());
        }
        for (name, v) in &adam.second {
            entries.insert(format!("adam.v/{name}"), v.cast());
        }
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                train: train.clone(),
                adam: adam.config,
                epoch,
                step: adam.step,
                scalar: T::NAME.to_string(),
            },
            entries,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            let meta = serde_json::to_vec(&self.meta)?;
            w.write_all(&(meta.len() as u64).to_le_bytes())?;
            w.write_all(&meta)?;
            w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
            for (name, t) in &self.entries {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(t.ndim() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad(format!("{} is not a checkpoint", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&read_bytes(&mut r, meta_len)?)?;
        let count = read_u64(&mut r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?).map_err(|_| bad("entry name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_bytes(&mut r, numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Self { meta, entries })
    }

    fn take<T: Scalar>(&self, key: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .entries
            .get(key)
            .ok_or_else(|| bad(format!("missing entry `{key}`")))?;
        if t.shape() != shape {
            return Err(bad(format!("entry `{key}` has shape {:?}, model expects {shape:?}", t.shape())));
        }
        Ok(t.cast())
    }

    /// Overwrites every parameter and mutable buffer of `model`.
    pub fn restore_model<T: Scalar>(&self, model: &mut CtoModel<T>) -> Result<()> {
        let mut err = None;
        model.visit_params_mut(&mut |p| {
            if err.is_none() {
                match self.take(&format!("param/{}", p.name()), p.value().shape()) {
                    Ok(t) => *p.value_mut() = t,
                    Err(e) => err = Some(e),
                }
            }
        });
        model.visit_buffers_mut(&mut |name, b| {
            if err.is_none() {
                match self.take(&format!("buffer/{name}"), b.shape()) {
                    Ok(t) => *b = t,
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn restore_adam<T: Scalar>(&self) -> Adam<T> {
        let mut adam = Adam::new(self.meta.adam);
        adam.step = self.meta.step;
        for (key, t) in &self.entries {
            if let Some(name) = key.strip_prefix("adam.m/") {
                adam.first.insert(name.to_string(), t.cast());
            } else if let Some(name) = key.strip_prefix("adam.v/") {
                adam.second.insert(name.to_string(), t.cast());
            }
        }
        adam
    }

    /// Rebuilds the model described by the metadata and loads its weights.
    pub fn build_model<T: Scalar>(&self) -> Result<CtoModel<T>> {
        let mut model = CtoModel::new(&self.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_model(&mut model)?;
        Ok(model)
    }
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| bad("truncated checkpoint"))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().expect("8 bytes")))
}
