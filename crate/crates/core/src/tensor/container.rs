//! Binary container shared by checkpoints, datasets and method state.
//!
//! Layout: 4-byte kind tag, `u32` format version, `u64` header length, a
//! JSON header, then the little-endian payload blocks in header order. The
//! header carries a CRC-32 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const KIND_CHECKPOINT: [u8; 4] = *b"CKPT";
pub const KIND_DATASET: [u8; 4] = *b"DSET";
pub const KIND_STATE: [u8; 4] = *b"STAT";
pub const KIND_DETECTOR: [u8; 4] = *b"KPCA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub trainable: Option<bool>,
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, dtype: Dtype, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            dtype,
            trainable: None,
            data,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    trainable: Option<bool>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: Value,
    entries: Vec<EntryHeader>,
    checksum: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: [u8; 4],
    pub metadata: Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn new(kind: [u8; 4], metadata: Value) -> Self {
        Self {
            kind,
            metadata,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, block: Block) {
        self.blocks.push(block);
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::Format(format!(
                    "block `{}` shape does not match data",
                    b.name
                )));
            }
            let offset = payload.len() as u64;
            match b.dtype {
                Dtype::F32 => b
                    .data
                    .iter()
                    .for_each(|v| payload.extend_from_slice(&(*v as f32).to_le_bytes())),
                Dtype::F64 => b
                    .data
                    .iter()
                    .for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            }
            entries.push(EntryHeader {
                name: b.name.clone(),
                shape: b.shape.clone(),
                dtype: b.dtype,
                trainable: b.trainable,
                offset,
                len: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            metadata: self.metadata.clone(),
            entries,
            checksum: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(&self.kind);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], kind: [u8; 4]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file shorter than its fixed preamble".into()));
        }
        if bytes[..4] != kind {
            return Err(Error::Format(format!(
                "expected a `{}` file, found `{}`",
                String::from_utf8_lossy(&kind),
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let payload = &body[hlen..];
        let found = crc32fast::hash(payload);
        if found != header.checksum {
            return Err(Error::Checksum {
                expected: header.checksum,
                found,
            });
        }
        let mut blocks = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let (start, len) = (e.offset as usize, e.len as usize);
            let count: usize = e.shape.iter().product();
            if start.checked_add(len).is_none_or(|end| end > payload.len())
                || len != count * e.dtype.width()
            {
                return Err(Error::Format(format!(
                    "block `{}` is truncated or mis-sized",
                    e.name
                )));
            }
            let raw = &payload[start..start + len];
            let data = match e.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            blocks.push(Block {
                name: e.name,
                shape: e.shape,
                dtype: e.dtype,
                trainable: e.trainable,
                data,
            });
        }
        Ok(Self {
            kind,
            metadata: header.metadata,
            blocks,
        })
    }

    /// Write through a temporary sibling and rename, so a crash never leaves
    /// a half-written file under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, kind: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, kind)
    }
}

/// Parameter blocks with trainable flags, stored as `f32`.
pub fn params_to_blocks(store: &ParamStore, prefix: &str) -> Vec<Block> {
    store
        .iter()
        .map(|(_, e)| Block {
            name: format!("{prefix}{}", e.name),
            shape: e.shape.clone(),
            dtype: Dtype::F32,
            trainable: Some(e.trainable),
            data: e.value.clone(),
        })
        .collect()
}

/// Rebuild a store from every block whose name starts with `prefix`.
pub fn blocks_to_params(blocks: &[Block], prefix: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for b in blocks.iter().filter(|b| b.name.starts_with(prefix)) {
        store.insert(
            &b.name[prefix.len()..],
            b.shape.clone(),
            b.data.clone(),
            b.trainable.unwrap_or(true),
        )?;
    }
    Ok(store)
}
