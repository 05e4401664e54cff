//! Flat key-value checkpoint file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "UBNCKPT\0"
//! version      u32       1
//! entry count  u64
//! per entry, sorted by key:
//!   key length   u32
//!   key          UTF-8 bytes
//!   value count  u64
//!   values       f64 * value count
//! ```
//!
//! Keys are dotted paths such as `layers.1.norm.running_mean`. Integer state
//! (step counters) is stored as `f64`, exact up to 2^53.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UBNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) {
        self.entries.insert(key.into(), values);
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Looks up `key` and checks it holds exactly `len` values.
    pub fn get_len(&self, key: &str, len: usize) -> Result<&[f64]> {
        let values = self
            .get(key)
            .ok_or_else(|| Error::State(format!("checkpoint has no entry `{key}`")))?;
        if values.len() != len {
            return Err(Error::Dimension(format!(
                "checkpoint entry `{key}` has {} values, expected {len}",
                values.len()
            )));
        }
        Ok(values)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (key, values) in &self.entries {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = u64::from_le_bytes(r.array()?);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let key_len = u32::from_le_bytes(r.array()?) as usize;
            let key_at = r.pos;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|_| Error::Format {
                    offset: key_at as u64,
                    message: "checkpoint key is not UTF-8".into(),
                })?
                .to_owned();
            let n = u64::from_le_bytes(r.array()?) as usize;
            let mut values = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                values.push(f64::from_le_bytes(r.array()?));
            }
            entries.insert(key, values);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes after last checkpoint entry".into(),
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated checkpoint: wanted {n} more bytes"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}
