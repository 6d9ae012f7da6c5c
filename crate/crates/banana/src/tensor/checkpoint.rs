//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"BNCKPT\0\x01"
//! u32     header length
//! bytes   header JSON (CheckpointMeta)
//! u32     record count
//! record* name_len:u32, name:utf8, dtype:u8 (0=f32 1=f64),
//!         ndim:u32, dims:u64*, payload (4 or 8 bytes per element, LE)
//! ```
//!
//! Round-trips are bit-exact: f64 payloads are raw bit patterns, f32 payloads
//! hold values that are exactly f32-representable by the dtype invariant on
//! [`Tensor`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BNCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

/// Header metadata. `extra` carries tool-specific strings such as an embedded
/// network config; contents never affect how records are decoded.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub tool_version: String,
    pub description: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            tool_version: crate::version().to_string(),
            description: String::new(),
            extra: BTreeMap::new(),
        }
    }
}

/// An ordered set of named tensors plus header metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, records: Vec::new() }
    }

    /// Appends a named tensor. Names must be unique within a checkpoint.
    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.records.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate record name {name:?}")));
        }
        self.records.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.meta)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let dt: u8 = match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
            };
            w.write_all(&[dt])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match t.dtype() {
                DType::F32 => {
                    for &v in t.data() {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                DType::F64 => {
                    for &v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:02x?}; not a checkpoint file or unsupported version",
                magic
            )));
        }
        let header_len = read_u32(r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let meta: CheckpointMeta = serde_json::from_slice(&header)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        let count = read_u32(r)? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("record name not utf-8: {e}")))?;
            let mut dt = [0u8; 1];
            r.read_exact(&mut dt)?;
            let dtype = match dt[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            match dtype {
                DType::F32 => {
                    let mut b = [0u8; 4];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        data.push(f32::from_le_bytes(b) as f64);
                    }
                }
                DType::F64 => {
                    let mut b = [0u8; 8];
                    for _ in 0..numel {
                        r.read_exact(&mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                }
            }
            records.push((name, Tensor::from_vec(shape, data, dtype)?));
        }
        Ok(Checkpoint { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
