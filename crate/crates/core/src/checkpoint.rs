//! Model files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SECAPCKPT"  u16 version  u32 meta_len  meta (JSON)  u32 param_count
//! per parameter: u16 name_len  name  u8 dtype  u8 rank  u64 dims[rank]  payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeCap};
use crate::objectives::LossWeights;
use crate::tensor::{numel, DType, Float, Tensor};

pub const MAGIC: &[u8; 9] = b"SECAPCKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    /// `(name, value)` in registration order.
    pub params: Vec<(String, Tensor<F>)>,
}

impl<F: Float> Checkpoint<F> {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore<F>) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { meta, params }
    }

    /// The parameter table alone, as stored in the file.
    pub fn param_table_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(F::DTYPE.code());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(64 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.param_table_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u32::from_le_bytes(r.array()?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let [dtype, rank] = r.array()?;
            let dtype = DType::from_code(dtype)?;
            let shape = (0..rank)
                .map(|_| r.array().map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<Vec<_>>>()?;
            let payload = r.take(numel(&shape) * dtype.size())?;
            let data = match dtype {
                DType::F32 => payload.chunks_exact(4).map(|c| F::from_f64(f32::read_le(c) as f64)).collect(),
                DType::F64 => payload.chunks_exact(8).map(|c| F::from_f64(f64::read_le(c))).collect(),
            };
            params.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Builds the model described by the metadata and fills its store. The
    /// stored table must name exactly the model's parameters, in order and
    /// with matching shapes.
    pub fn restore(&self) -> Result<(SeCap, ParamStore<F>)> {
        let (model, mut store) = SeCap::new::<F>(&self.meta.model, 0)?;
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            let p = store.get_mut(id);
            if &p.name != name {
                return Err(Error::Format(format!("checkpoint parameter {name} where model expects {}", p.name)));
            }
            if p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok((model, store))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}
