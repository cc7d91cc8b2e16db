//! Flat little-endian checkpoint files.
//!
//! Layout: `u64` entry count, then per entry `u64` name length, UTF-8 name,
//! `u64` rank, `rank` x `u64` dims, and the `f32` payload.

use std::fs;
use std::path::Path;

use super::tape::ParamStore;
use super::Tensor;
use crate::error::{AecError, Result};

/// Prefix of non-trainable buffers in a checkpoint.
pub const BUFFER_PREFIX: &str = "buffer/";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.tensor.shape.len() as u64).to_le_bytes());
        for &d in &e.tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| AecError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AecError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| AecError::Parse("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len().saturating_mul(8))
            .ok_or_else(|| AecError::Parse(format!("implausible length {v} in checkpoint")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let buf = fs::read(path).map_err(|e| AecError::io(path, e))?;
    parse(&buf)
}

fn parse(buf: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader { buf, pos: 0 };
    let count = r.len()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = r.len()?;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| AecError::Parse("checkpoint name is not UTF-8".into()))?;
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| AecError::Parse("checkpoint tensor too large".into()))?;
        let bytes = r.take(numel.checked_mul(4).ok_or_else(|| AecError::Parse("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push(CheckpointEntry { name, tensor: Tensor { shape, data } });
    }
    if r.pos != buf.len() {
        return Err(AecError::Parse("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

/// Parameters under their own names and buffers under `buffer/{name}`.
pub fn store_entries(store: &ParamStore<f32>) -> Vec<CheckpointEntry> {
    let params = store.iter().map(|(_, p)| CheckpointEntry {
        name: p.name.clone(),
        tensor: p.value.clone(),
    });
    let buffers = store.buffers().map(|(k, v)| CheckpointEntry {
        name: format!("{BUFFER_PREFIX}{k}"),
        tensor: v.clone(),
    });
    params.chain(buffers).collect()
}

/// Overwrites every parameter and buffer of `store` from `entries`. Each
/// must be present with the same shape; extra entries are ignored.
pub fn restore_store(store: &mut ParamStore<f32>, entries: &[CheckpointEntry]) -> Result<()> {
    let find = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| AecError::Parse(format!("checkpoint lacks {name}")))?;
        if e.tensor.shape != shape {
            return Err(AecError::ShapeMismatch {
                op: "checkpoint entry",
                lhs: e.tensor.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(e.tensor.clone())
    };
    for p in store.params.iter_mut() {
        p.value = find(&p.name, &p.value.shape)?;
    }
    let names: Vec<(String, Vec<usize>)> =
        store.buffers().map(|(k, v)| (k.clone(), v.shape.clone())).collect();
    for (k, shape) in names {
        let t = find(&format!("{BUFFER_PREFIX}{k}"), &shape)?;
        store.set_buffer(k, t);
    }
    Ok(())
}
