//! Binary checkpoints: a JSON header followed by every tensor as raw
//! little-endian `f64`, in [`Parameters`] visiting order.
//!
//! Layout:
//!
//! ```text
//! b"TXDTCKPT" | u32 version | u64 header_len | header JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 rank | u64 dims... | f64 data...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cem::CemParams;
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::labelspace::EmbeddingTable;
use crate::model::{Detector, ModelConfig};
use crate::nn::Parameters;

const MAGIC: &[u8; 8] = b"TXDTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    categories: usize,
    learnable_embeddings: bool,
    meta: serde_json::Value,
}

/// Serializes `model` plus caller metadata into bytes.
pub fn to_bytes(model: &Detector, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config,
        categories: model.k(),
        learnable_embeddings: model.embeddings.learnable,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = model.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Detector, serde_json::Value)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(header_len)?)?;
    header.config.validate()?;
    let cfg = header.config;
    let mut model = Detector {
        config: cfg,
        cem: CemParams::zeros(header.categories, cfg.d, cfg.d_ff),
        head: HeadParams::zeros(cfg.d, cfg.d_ff),
        embeddings: EmbeddingTable {
            rows: ndarray::Array2::zeros((header.categories, cfg.d)),
            learnable: header.learnable_embeddings,
        },
    };
    let expected: Vec<(String, Vec<usize>)> =
        model.tensors().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, expected {}", expected.len())));
    }
    let mut targets = model.tensors_mut();
    for ((name, shape), target) in expected.iter().zip(targets.iter_mut()) {
        let name_len = c.u32()? as usize;
        let got_name =
            std::str::from_utf8(c.take(name_len)?).map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if got_name != name || &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {got_name:?} {dims:?} where {name:?} {shape:?} was expected"
            )));
        }
        for v in target.data.iter_mut() {
            *v = f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
        }
    }
    drop(targets);
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((model, header.meta))
}

pub fn save(path: impl AsRef<Path>, model: &Detector, meta: &serde_json::Value) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Detector, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
