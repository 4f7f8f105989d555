//! Binary checkpoint: magic, format version, JSON header, then raw tensors.
//!
//! Layout (little endian): `b"FFLTCKPT"`, `u32` version, `u64` header length,
//! header JSON, then for each group in header order and each tensor in group
//! order: `u32` rank, `u64` per dim, `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::ModelState;
use super::TrainConfig;
use crate::embeddings::EncoderAdapter;
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, DiscriminatorHead};
use crate::hyperfilter::{HyperNetwork, HyperShape};
use crate::numerics::{ParamGroup, Tensor};

const MAGIC: &[u8; 8] = b"FFLTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupHeader {
    name: String,
    tensors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    hyper_shape: HyperShape,
    seen_targets: Vec<String>,
    text_fallback: bool,
    config: Option<TrainConfig>,
    groups: Vec<GroupHeader>,
}

/// A model plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = Header {
            hyper_shape: m.hyper.shape(),
            seen_targets: m.seen_targets().to_vec(),
            text_fallback: m.text_fallback,
            config: self.config.clone(),
            groups: m
                .groups()
                .iter()
                .map(|g| GroupHeader {
                    name: g.name().to_string(),
                    tensors: g.names().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for g in m.groups() {
            for t in g.tensors() {
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let mut groups = Vec::with_capacity(header.groups.len());
        for gh in &header.groups {
            let mut group = ParamGroup::new(gh.name.clone());
            for name in &gh.tensors {
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
                group.push(name.clone(), t);
            }
            groups.push(group);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let [enc, hyper, dis, hate]: [ParamGroup; 4] = groups
            .try_into()
            .map_err(|_| Error::Checkpoint("expected four parameter groups".into()))?;
        let model = ModelState {
            adapter: EncoderAdapter::from_group(enc)?,
            hyper: HyperNetwork::from_group(hyper, header.hyper_shape)?,
            dis: DiscriminatorHead::from_group(dis, header.seen_targets)?,
            hate: ClassifierHead::from_group(hate)?,
            text_fallback: header.text_fallback,
        };
        Ok(Self {
            model,
            config: header.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
