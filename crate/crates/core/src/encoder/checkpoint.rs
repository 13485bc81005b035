//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BSCLCKPT" | u32 version | u32 header_len | header bytes
//! u32 blob_count | blobs...
//! blob: u32 name_len | name | u8 dtype | u32 ndim | u64 dims[ndim] | raw values
//! ```
//!
//! The header is UTF-8 `key=value` lines in sorted key order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{ParamStore, Tensor};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BSCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("blob `{name}` has dtype {found:?}, expected {expected:?}")]
    DType { name: String, found: DType, expected: DType },
    #[error("blob `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint has no blob `{0}`")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedBlob {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl NamedBlob {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.width());
        for &x in t.data() {
            x.write_le(&mut bytes);
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, CheckpointError> {
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::DType {
                name: self.name.clone(),
                found: self.dtype,
                expected: T::DTYPE,
            });
        }
        let data = self.bytes.chunks_exact(T::DTYPE.width()).map(T::read_le).collect();
        Tensor::from_vec(&self.shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub blobs: Vec<NamedBlob>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }
}

impl Checkpoint {
    /// Snapshots the parameters selected by `keep`.
    pub fn from_store<T: Scalar>(
        header: BTreeMap<String, String>,
        store: &ParamStore<T>,
        mut keep: impl FnMut(&str) -> bool,
    ) -> Self {
        let blobs = store
            .iter()
            .filter(|p| keep(&p.name))
            .map(|p| NamedBlob::from_tensor(&p.name, &p.value))
            .collect();
        Self { header, blobs }
    }

    pub fn blob(&self, name: &str) -> Option<&NamedBlob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    fn load_param<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        name: &str,
    ) -> Result<(), CheckpointError> {
        let id = store.find(name).expect("caller iterates the store");
        let blob = self
            .blob(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        let expected = store.value(id).shape().to_vec();
        if blob.shape != expected {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                found: blob.shape.clone(),
                expected,
            });
        }
        store.get_mut(id).value = blob.to_tensor()?;
        Ok(())
    }

    /// Overwrites every parameter of `store`; each must have a blob of the
    /// same shape and dtype. Extra blobs are ignored.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in &names {
            self.load_param(store, name)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.dtype.tag());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&b.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::Magic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = r.u32()? as usize;
        let text = r.string(header_len)?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| CheckpointError::Malformed(format!("dtype tag {tag} on `{name}`")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(dtype.width(), |acc: usize, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("shape overflow on `{name}`")))?;
            let data = r.take(n)?.to_vec();
            blobs.push(NamedBlob {
                name,
                dtype,
                shape,
                bytes: data,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, blobs })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}
