//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! tag      8 bytes  "COR-CKPT"
//! version  u32      1
//! count    u32      number of parameters
//! table    count × { name_len u32, name utf-8, frozen u8, ndim u32, dims u32 × ndim }
//! payload  f32 values of every parameter, in table order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{CorError, Result};

pub const CHECKPOINT_TAG: &[u8; 8] = b"COR-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f32>,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_TAG);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.frozen as u8);
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for d in p.tensor.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CorError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_TAG {
        return Err(CorError::Checkpoint("missing COR-CKPT tag".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| CorError::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let frozen = cur.take(1)?[0] != 0;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        entries.push(CheckpointEntry { name, shape, frozen, data: Vec::new() });
    }
    for e in entries.iter_mut() {
        let n: usize = e.shape.iter().product();
        let raw = cur.take(n * 4)?;
        e.data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    }
    if cur.pos != bytes.len() {
        return Err(CorError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(entries)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CorError::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| CorError::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CorError::io(path, e))?;
    decode(&bytes)
}

/// Overwrites `store` values from checkpoint entries. Names, order and shapes
/// must match exactly.
pub fn restore(store: &mut ParamStore, entries: &[CheckpointEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(CorError::Checkpoint(format!(
            "checkpoint holds {} parameters, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (p, e) in store.iter_mut().zip(entries) {
        if p.name != e.name || p.tensor.shape() != e.shape.as_slice() {
            return Err(CorError::Checkpoint(format!(
                "expected {} {:?}, found {} {:?}",
                p.name,
                p.tensor.shape(),
                e.name,
                e.shape
            )));
        }
        let t = Tensor::new(&e.shape, e.data.iter().map(|v| *v as f64).collect())?;
        p.tensor.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    restore(store, &read(path)?)
}
