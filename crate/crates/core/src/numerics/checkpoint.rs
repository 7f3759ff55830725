//! Versioned little-endian container of named f64 tensors.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "PRSDTNSR"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! count      u32
//! count × { name_len u32, name UTF-8, rank u32, rank × u64 extents, f64 payload }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PRSDTNSR";
pub const FORMAT_VERSION: u32 = 1;

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    /// Free-form JSON metadata (model config, step counters).
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON values always serialize");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| "truncated header".to_string())?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta_bytes = take(&mut r, meta_len)?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| format!("metadata: {e}"))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)
                    .map_err(|_| "truncated extents".to_string())?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut r, n.checked_mul(8).ok_or("tensor too large")?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(TensorArchive { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| "truncated file".to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("truncated file".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
