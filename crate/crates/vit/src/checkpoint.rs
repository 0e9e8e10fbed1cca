//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SARCKPT\0"
//! version  u32
//! header   u64 length + UTF-8 JSON object ("model" holds the ViT config)
//! count    u32
//! tensor   u32 name length, name, u32 rank, u64 dims[rank], f64 values
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Tensors are written in the order given, so identical inputs produce
//! identical bytes.

use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Params;

pub const MAGIC: &[u8; 8] = b"SARCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Map<String, Value>,
    pub tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut header = Map::new();
        header.insert("model".into(), serde_json::to_value(&model.config).expect("config serializes"));
        let mut tensors = Vec::new();
        model.params.for_each(|name, shape, data| {
            tensors.push(NamedTensor { name: name.to_string(), shape: shape.to_vec(), data: data.to_vec() })
        });
        Self { header, tensors }
    }

    pub fn model_config(&self) -> Result<ViTConfig> {
        let v = self.header.get("model").ok_or_else(|| bad("header has no model config"))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model; every parameter must be present with the expected shape.
    pub fn to_model(&self) -> Result<Model> {
        let config = self.model_config()?;
        config.validate()?;
        let mut params = Params::zeros(&config);
        let layout = params.layout();
        let mut missing = None;
        let mut idx = 0;
        params.for_each_mut(|name, values| {
            let shape = &layout[idx].1;
            idx += 1;
            match self.tensor(name) {
                Some(t) if &t.shape == shape && t.data.len() == values.len() => values.copy_from_slice(&t.data),
                _ => {
                    missing.get_or_insert_with(|| name.to_string());
                }
            }
        });
        if let Some(name) = missing {
            return Err(bad(format!("tensor {name} missing or misshapen")));
        }
        Model::from_params(config, params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Value::Object(self.header.clone())).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 32 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header = match serde_json::from_slice(r.take(hlen)?)? {
            Value::Object(m) => m,
            _ => return Err(bad("header is not a JSON object")),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensors"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
