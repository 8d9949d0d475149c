//! Single-file binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE header length, a JSON
//! header, then raw `f64` LE payloads. The header lists every tensor with
//! its section, shape and byte offset into the payload area.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

use super::{Adam, MetaGait, ModelConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"METAGAIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    adam: AdamHeader,
    tensors: Vec<Entry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub store: ParamStore,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.model.config().clone(),
            step: t.step,
            store: t.store.clone(),
            adam: t.adam.clone(),
        }
    }

    /// Rebuilds the network from the stored config and checks that the
    /// stored tensors match it exactly.
    pub fn into_trainer(self) -> Result<Trainer> {
        let (model, fresh) = MetaGait::new(self.config)?;
        let same_names = fresh.names().eq(self.store.names());
        let same_shapes = fresh
            .iter()
            .zip(self.store.iter())
            .all(|((_, a), (_, b))| a.shape() == b.shape());
        if !same_names || !same_shapes || fresh.len() != self.store.len() {
            return Err(Error::Checkpoint(
                "stored tensors do not match the network built from the stored config".into(),
            ));
        }
        Ok(Trainer {
            model,
            store: self.store,
            adam: self.adam,
            step: self.step,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, section: Section, shape: &[usize], data: &[f64]| {
        entries.push(Entry {
            name: name.to_string(),
            section,
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in ckpt.store.iter() {
        push(name, Section::Param, t.shape(), t.data());
    }
    for (section, moments) in [(Section::AdamM, &ckpt.adam.m), (Section::AdamV, &ckpt.adam.v)] {
        for (name, data) in moments {
            let shape = ckpt
                .store
                .get(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![data.len()]);
            push(name, section, &shape, data);
        }
    }
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        adam: AdamHeader {
            lr: ckpt.adam.lr,
            beta1: ckpt.adam.beta1,
            beta2: ckpt.adam.beta2,
            eps: ckpt.adam.eps,
            t: ckpt.adam.t,
        },
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])?;
    let payload = &bytes[body..];

    let mut store = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in header.tensors {
        let n = numel(&e.shape);
        let start = e.offset as usize;
        let end = start
            .checked_add(n * 8)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| bad(&format!("payload of {} out of range", e.name)))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match e.section {
            Section::Param => store.insert(e.name, Tensor::new(e.shape, data)?)?,
            Section::AdamM => {
                m.insert(e.name, data);
            }
            Section::AdamV => {
                v.insert(e.name, data);
            }
        }
    }
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        store,
        adam: Adam {
            lr: header.adam.lr,
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            t: header.adam.t,
            m,
            v,
        },
    })
}
