//! `SDCK` checkpoint files.
//!
//! ```text
//! magic        4 bytes  "SDCK"
//! version      u16      1
//! config       u32 byte length + UTF-8 key = value text
//! tensors      u32 count, then per tensor:
//!                u16 name length + UTF-8 name, u8 rank, rank × u32 dims,
//!                f32 payload, row-major
//! crc32        u32 over every byte between the version and the checksum
//! ```
//!
//! All multi-byte values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geodata::srt1::Cursor;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u16 = 1;

const HEADER_LEN: usize = 6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self { config: config.into(), tensors: Vec::new() }
    }

    /// Appends every tensor of `store`, parameters and buffers alike.
    pub fn with_store(mut self, store: &ParamStore) -> Self {
        self.tensors.extend(store.entries().map(|(_, e)| (e.name.clone(), e.value.clone())));
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&dotted))
    }

    /// Overwrites every tensor of `store` with the same-named checkpoint
    /// tensor; all of them must be present with matching shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let targets: Vec<_> = store.entries().map(|(id, e)| (id, e.name.clone())).collect();
        for (id, name) in targets {
            let t = self.get(&name).ok_or_else(|| Error::config(format!("checkpoint lacks tensor {name}")))?;
            store.replace(id, t.clone()).map_err(|e| Error::config(format!("checkpoint tensor {name}: {e}")))?;
        }
        Ok(())
    }

    /// All tensors under `prefix.` as a fresh store of trainable weights.
    pub fn store_with_prefix(&self, prefix: &str) -> ParamStore {
        let dotted = format!("{prefix}.");
        let mut store = ParamStore::new();
        for (n, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(&dotted)) {
            store.add(n.clone(), t.clone(), ParamKind::Weight);
        }
        store
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = u32::try_from(self.config.len()).map_err(|_| Error::data("config text too long"))?;
        out.extend_from_slice(&cfg.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::data(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::data(format!("tensor {name} has too many axes")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::format(0, "bad magic, not an SDCK checkpoint"));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, expected: VERSION });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[HEADER_LEN..body_end]);
        if stored != actual {
            return Err(Error::format(
                body_end as u64,
                format!("CRC32 checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        let mut cur = Cursor::new(&bytes[HEADER_LEN..body_end]);
        cur.offset = HEADER_LEN as u64;
        let len = cur.u32("config length")? as usize;
        let at = cur.offset;
        let config = String::from_utf8(cur.bytes(len, "config text")?)
            .map_err(|_| Error::format(at, "config text is not UTF-8"))?;
        let count = cur.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u16("tensor name length")? as usize;
            let at = cur.offset;
            let name = String::from_utf8(cur.bytes(len, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
            let rank = cur.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("tensor dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.bytes(4 * n, "tensor payload")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.offset != body_end as u64 {
            return Err(Error::format(cur.offset, "trailing bytes before checksum"));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
