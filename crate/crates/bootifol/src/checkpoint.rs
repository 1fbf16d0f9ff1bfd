//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "BIFOCKPT"
//! version      u32      1
//! entries      u32      number of entries
//! data_start   u64      absolute offset of the data section
//! per entry:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   offset     u64      byte offset of the entry inside the data section
//! data         concatenated little-endian f32 arrays
//! ```

use std::path::Path;

use bootifol_core::tensor::{Module, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BIFOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Every parameter and buffer of the given modules, in visiting order.
    pub fn capture(modules: &[&dyn Module<f32>]) -> Self {
        let mut entries = Vec::new();
        for m in modules {
            m.visit(&mut |p| {
                entries.push(Entry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.data().to_vec(),
                })
            });
        }
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Loads values into `modules`; names and shapes must match exactly and
    /// every entry must be consumed.
    pub fn restore(&self, modules: &mut [&mut dyn Module<f32>]) -> Result<()> {
        let mut used = 0;
        let mut failure = None;
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if failure.is_some() {
                    return;
                }
                match self.get(&p.name) {
                    Some(e) if e.shape == p.value.shape() => match Tensor::new(&e.shape, e.data.clone()) {
                        Ok(t) => {
                            p.value = t.into();
                            used += 1;
                        }
                        Err(err) => failure = Some(Error::from(err)),
                    },
                    Some(e) => {
                        failure = Some(Error::Config(format!(
                            "checkpoint entry {} has shape {:?}, the network expects {:?}",
                            p.name,
                            e.shape,
                            p.value.shape()
                        )))
                    }
                    None => failure = Some(Error::Config(format!("checkpoint lacks entry {}", p.name))),
                }
            });
        }
        if let Some(e) = failure {
            return Err(e);
        }
        if used != self.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} entries, the network uses {}",
                self.entries.len(),
                used
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        let mut offset = 0u64;
        for e in &self.entries {
            header.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            header.extend_from_slice(e.name.as_bytes());
            header.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * e.data.len() as u64;
        }
        let data_start = (8 + 4 + 4 + 8 + header.len()) as u64;
        let mut out = Vec::with_capacity(data_start as usize + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&data_start.to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |why: &str| Error::format(path, why);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let data_start = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
            let name = r.take(len).ok_or_else(|| bad("truncated entry"))?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| bad("entry name is not UTF-8"))?;
            let ndim = r.u32().ok_or_else(|| bad("truncated entry"))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated entry"))?;
            let offset = r.u64().ok_or_else(|| bad("truncated entry"))? as usize;
            meta.push((name, shape, offset));
        }
        if r.pos != data_start {
            return Err(bad("data section does not follow the header"));
        }
        let data = &bytes[data_start..];
        let mut entries = Vec::with_capacity(count);
        for (name, shape, offset) in meta {
            let n: usize = shape.iter().product();
            let raw = offset
                .checked_add(4 * n)
                .and_then(|end| data.get(offset..end))
                .ok_or_else(|| bad(&format!("entry {name} runs past the end of the file")))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push(Entry {
                name,
                shape,
                data: values,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
