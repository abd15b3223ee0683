//! Named weight store and its binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "S2V2" | version: u32 | entry count: u32
//! per entry: name length: u32 | name (UTF-8) | rank: u32 | dims: u64 * rank
//!            | dtype: u8 (0 = f32) | values: f32 * product(dims)
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"S2V2";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

/// Ordered collection of named tensors. Iteration order is insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for WeightArchive<T> {
    fn default() -> Self {
        WeightArchive {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Scalar> WeightArchive<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Archive(format!("duplicate weight name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing weight {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Archive(format!("missing weight {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalars across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WeightArchive<U> {
        WeightArchive {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

impl WeightArchive<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.scalar_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version_at = r.pos;
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(r.error_at(version_at, format!("unsupported format version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut archive = WeightArchive::new();
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| r.error_at(name_at + 4, format!("weight name is not UTF-8: {e}")))?
                .to_owned();
            let rank_at = r.pos;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(r.error_at(rank_at, format!("rank {rank} outside 1..={MAX_RANK}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let dim_at = r.pos;
                let d = r.u64("dimension")?;
                if d == 0 || d > u32::MAX as u64 {
                    return Err(r.error_at(dim_at, format!("invalid extent {d}")));
                }
                dims.push(d as usize);
            }
            let dtype_at = r.pos;
            let dtype = r.take(1, "dtype tag")?[0];
            if dtype != DTYPE_F32 {
                return Err(r.error_at(dtype_at, format!("unknown dtype tag {dtype}")));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4, &format!("values of {name:?}"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(dims, data)?;
            if archive.contains(&name) {
                return Err(r.error_at(name_at, format!("duplicate weight name {name:?}")));
            }
            archive.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(
                r.pos,
                format!(
                    "{} trailing bytes after the declared {count} entries",
                    bytes.len() - r.pos
                ),
            ));
        }
        Ok(archive)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn error_at(&self, offset: usize, message: String) -> Error {
        Error::Format {
            offset: offset as u64,
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(self.error_at(
                self.pos,
                format!("truncated {what}: expected {n} bytes, found {available}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_weights(archive: &WeightArchive<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, archive.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightArchive<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightArchive::from_bytes(&bytes)
}
