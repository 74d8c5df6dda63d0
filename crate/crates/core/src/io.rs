//! Binary tensor serialization.
//!
//! Single tensor: `b"CAPT"`, `u8` scalar width (4 or 8), `u8` rank, `rank` little-endian
//! `u32` extents, then the raw little-endian scalars.
//!
//! Named archive: `b"CAPA"`, `u8` version (1), `u32` entry count, then per entry a
//! `u16` name length, the UTF-8 name and a `u64` byte length. The encoded tensors follow
//! the directory, concatenated in directory order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"CAPT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"CAPA";
const ARCHIVE_VERSION: u8 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::WIDTH);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * T::WIDTH as usize);
    encode_tensor(t, &mut out);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                what: self.what.to_string(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_tensor_from<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let width = r.u8()?;
    let rank = r.u8()? as usize;
    let dims = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let data: Vec<T> = match width {
        4 => r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        8 => r
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
        w => return Err(Error::Format(format!("unsupported scalar width {w}"))),
    };
    Tensor::new(dims, data)
}

/// Decodes one tensor, converting the stored precision to `T`.
pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "tensor",
    };
    let t = decode_tensor_from(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Archive<T> {
    fn default() -> Self {
        Archive { entries: Vec::new() }
    }
}

impl<T: Scalar> Archive<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("archive has no entry named {name:?}")))
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.entries.iter().map(|(_, t)| tensor_to_bytes(t)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.push(ARCHIVE_VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for ((name, _), blob) in self.entries.iter().zip(&blobs) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        }
        for blob in blobs {
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what: "archive",
        };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Format("bad archive magic".into()));
        }
        let version = r.u8()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("entry name: {e}")))?
                .to_string();
            let size = r.u64()? as usize;
            dir.push((name, size));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, size) in dir {
            let blob = r.take(size)?;
            entries.push((name, tensor_from_bytes(blob)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after archive".into()));
        }
        Ok(Archive { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
