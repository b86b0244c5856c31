//! Binary container: a JSON manifest followed by named, shaped tensor records.
//!
//! ```text
//! magic      8 bytes  "GLYRLCT\0"
//! version    u32
//! manifest   u64 length, UTF-8 JSON bytes, 32-byte SHA-256 of the bytes
//! count      u32
//! record*    u16 name length, name, u8 dtype, u8 ndim, u64 dims[ndim],
//!            u64 payload length, payload, 32-byte SHA-256 of the payload
//! trailer    32-byte SHA-256 of every preceding byte
//! ```
//!
//! Integers and payload elements are little-endian. Writing the same
//! container twice produces identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"GLYRLCT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a glyrl container (bad magic)")]
    BadMagic,
    #[error("container version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("container truncated while reading {0}")]
    Truncated(String),
    #[error("manifest hash mismatch")]
    ManifestHashMismatch,
    #[error("record `{0}` is corrupted (hash mismatch)")]
    CorruptRecord(String),
    #[error("container hash mismatch")]
    ContainerHashMismatch,
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("record `{name}`: {reason}")]
    BadRecord { name: String, reason: String },
    #[error("missing record `{0}`")]
    MissingRecord(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U32(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }

    fn from_le_bytes(tag: u8, bytes: &[u8], name: &str) -> Result<Self, ContainerError> {
        let bad = |reason: &str| ContainerError::BadRecord {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        Ok(match tag {
            0 => {
                if bytes.len() % 4 != 0 {
                    return Err(bad("f32 payload length not a multiple of 4"));
                }
                TensorData::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                if bytes.len() % 8 != 0 {
                    return Err(bad("f64 payload length not a multiple of 8"));
                }
                TensorData::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                if bytes.len() % 4 != 0 {
                    return Err(bad("u32 payload length not a multiple of 4"));
                }
                TensorData::U32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            3 => TensorData::U8(bytes.to_vec()),
            other => return Err(bad(&format!("unknown dtype tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn as_f32(&self) -> Result<&[f32], ContainerError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(self.type_error("f32")),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64], ContainerError> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(self.type_error("f64")),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32], ContainerError> {
        match &self.data {
            TensorData::U32(v) => Ok(v),
            _ => Err(self.type_error("u32")),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], ContainerError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(self.type_error("u8")),
        }
    }

    fn type_error(&self, want: &str) -> ContainerError {
        ContainerError::BadRecord {
            name: self.name.clone(),
            reason: format!("expected {want} data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    /// Raw JSON text, kept verbatim so round trips are byte-exact.
    pub manifest: String,
    pub records: Vec<Record>,
}

impl Container {
    pub fn new(manifest: String) -> Self {
        Self {
            manifest,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Result<&Record, ContainerError> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| ContainerError::MissingRecord(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = self.manifest.as_bytes();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest);
        out.extend_from_slice(&Sha256::digest(manifest));
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(ContainerError::Malformed(format!("record name too long: {}", r.name)));
            }
            let elems: usize = r.shape.iter().product();
            if elems != r.data.len() {
                return Err(ContainerError::BadRecord {
                    name: r.name.clone(),
                    reason: format!("shape {:?} holds {elems} values, data has {}", r.shape, r.data.len()),
                });
            }
            if r.shape.len() > u8::MAX as usize {
                return Err(ContainerError::Malformed("too many dimensions".into()));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.data.dtype_tag());
            out.push(r.shape.len() as u8);
            for d in &r.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let payload = r.data.to_le_bytes();
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&Sha256::digest(&payload));
        }
        let trailer = Sha256::digest(&out);
        out.extend_from_slice(&trailer);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(8, "magic")?;
        if magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = rd.u32("version")?;
        if version != VERSION {
            return Err(ContainerError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let mlen = rd.u64("manifest length")? as usize;
        let manifest = rd.take(mlen, "manifest")?;
        let mhash = rd.take(32, "manifest hash")?;
        if Sha256::digest(manifest).as_slice() != mhash {
            return Err(ContainerError::ManifestHashMismatch);
        }
        let manifest = std::str::from_utf8(manifest)
            .map_err(|_| ContainerError::Malformed("manifest is not UTF-8".into()))?
            .to_string();
        let count = rd.u32("record count")?;
        let mut records = Vec::with_capacity(count as usize);
        for i in 0..count {
            let nlen = rd.u16(&format!("record {i} name length"))? as usize;
            let name = rd.take(nlen, &format!("record {i} name"))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| ContainerError::Malformed(format!("record {i} name is not UTF-8")))?
                .to_string();
            let tag = rd.u8(&name)?;
            let ndim = rd.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(rd.u64(&name)? as usize);
            }
            let plen = rd.u64(&name)? as usize;
            let payload = rd.take(plen, &name)?;
            let hash = rd.take(32, &name)?;
            if Sha256::digest(payload).as_slice() != hash {
                return Err(ContainerError::CorruptRecord(name));
            }
            let data = TensorData::from_le_bytes(tag, payload, &name)?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(ContainerError::BadRecord {
                    name,
                    reason: "shape does not match payload".into(),
                });
            }
            records.push(Record { name, shape, data });
        }
        let body_end = rd.pos;
        let trailer = rd.take(32, "trailer")?;
        if Sha256::digest(&bytes[..body_end]).as_slice() != trailer {
            return Err(ContainerError::ContainerHashMismatch);
        }
        if rd.pos != bytes.len() {
            return Err(ContainerError::Malformed("trailing bytes after container".into()));
        }
        Ok(Self { manifest, records })
    }

    /// Write to a temporary sibling and rename into place.
    pub fn write_atomic(&self, path: &Path) -> Result<(), ContainerError> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Atomic file write (write-then-rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    let io = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io)?;
        }
    }
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

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| ContainerError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
