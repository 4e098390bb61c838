//! Little-endian binary containers and atomic file writes.
//!
//! Tensor containers (`DCMODEL` checkpoints, `DCSCORE` score files):
//!
//! ```text
//! magic             ASCII, no terminator
//! version           u16
//! tensor count      u32
//! per tensor:
//!   path            u16 byte length + UTF-8 bytes
//!   kind            u8
//!   rank            u8
//!   dims            rank × u32
//!   values          product(dims) × f64
//! trailer           JSON text up to end of file (may be empty)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TensorRecord {
    pub path: String,
    pub kind: u8,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn encode_tensors(magic: &[u8], records: &[TensorRecord], trailer: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| too_large("tensor count"))?.to_le_bytes());
    for r in records {
        put_str(&mut out, &r.path)?;
        out.push(r.kind);
        out.push(u8::try_from(r.dims.len()).map_err(|_| too_large("rank"))?);
        for &d in &r.dims {
            out.extend_from_slice(&u32::try_from(d).map_err(|_| too_large("dimension"))?.to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(trailer.as_bytes());
    Ok(out)
}

pub(crate) fn decode_tensors(magic: &[u8], bytes: &[u8]) -> Result<(Vec<TensorRecord>, String)> {
    let mut r = Reader::new(bytes);
    r.magic(magic)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let path = r.string()?;
        let kind = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        records.push(TensorRecord {
            path,
            kind,
            dims,
            values,
        });
    }
    let trailer = r.rest_utf8()?;
    Ok((records, trailer))
}

fn too_large(what: &str) -> Error {
    Error::Format(format!("{what} does not fit the container field"))
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| too_large("path length"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Checks the magic and the format version.
    pub fn magic(&mut self, magic: &[u8]) -> Result<()> {
        let found = self.take(magic.len()).map_err(|_| Error::Format("file too short for its magic".into()))?;
        if found != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(found)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Format(format!("path is not UTF-8: {e}")))
    }

    pub fn rest_utf8(&mut self) -> Result<String> {
        let rest = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        String::from_utf8(rest.to_vec()).map_err(|e| Error::Format(format!("trailer is not UTF-8: {e}")))
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
