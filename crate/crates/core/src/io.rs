//! The GPOT tensor container and flat key-value text files.
//!
//! GPOT layout (little-endian): `b"GPOT"`, `u32` version 1, `u8` dtype
//! (1 = f64), `u8` rank, `rank × u64` dims, row-major `f64` payload, then a
//! `u32` CRC32 of every preceding byte.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GPOT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed container at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { path: PathBuf, stored: u32, computed: u32 },
    #[error("{path}:{line}: {reason}")]
    Text { path: PathBuf, line: usize, reason: String },
    #[error("tensor with dims {dims:?} needs {expected} values, got {got}")]
    Shape {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

impl IoError {
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A dense row-major f64 array as stored in a container.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, IoError> {
        let expected = dims.iter().product();
        if data.len() != expected || dims.len() > u8::MAX as usize {
            return Err(IoError::Shape {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(RawTensor { dims, data })
    }
}

pub fn encode(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 8 * t.dims.len() + 8 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a container; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<RawTensor, IoError> {
    let fail = |offset: usize, reason: &str| IoError::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };
    let need = |offset: usize, len: usize, what: &str| {
        if bytes.len() < offset + len {
            Err(fail(bytes.len(), &format!("truncated while reading {what}")))
        } else {
            Ok(&bytes[offset..offset + len])
        }
    };
    if need(0, 4, "magic")? != MAGIC {
        return Err(fail(0, "bad magic (expected GPOT)"));
    }
    let version = u32::from_le_bytes(need(4, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(4, &format!("unsupported version {version}")));
    }
    let dtype = need(8, 1, "dtype")?[0];
    if dtype != DTYPE_F64 {
        return Err(fail(8, &format!("unsupported dtype code {dtype}")));
    }
    let rank = need(9, 1, "rank")?[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut off = 10;
    for _ in 0..rank {
        let d = u64::from_le_bytes(need(off, 8, "dims")?.try_into().expect("8 bytes"));
        dims.push(usize::try_from(d).map_err(|_| fail(off, "dimension overflows usize"))?);
        off += 8;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| fail(10, "payload size overflows"))?;
    let expected_len = off + count + 4;
    if bytes.len() != expected_len {
        return Err(fail(
            bytes.len().min(off + count),
            &format!(
                "payload length {} does not match dims {dims:?}",
                bytes.len().saturating_sub(off + 4)
            ),
        ));
    }
    let stored = u32::from_le_bytes(bytes[off + count..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..off + count]);
    if stored != computed {
        return Err(IoError::Crc {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut data = Vec::with_capacity(count / 8);
    for (i, c) in bytes[off..off + count].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(fail(off + 8 * i, "non-finite value"));
        }
        data.push(v);
    }
    Ok(RawTensor { dims, data })
}

pub fn write_tensor(path: &Path, t: &RawTensor) -> Result<(), IoError> {
    fs::write(path, encode(t)).map_err(|e| IoError::file(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RawTensor, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::file(path, e))?;
    decode(&bytes, path)
}

/// `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| IoError::Text {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = k.trim().to_string();
        if key.is_empty() || out.iter().any(|(e, _)| *e == key) {
            return Err(IoError::Text {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("empty or duplicate key '{key}'"),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    parse_key_values(&text, path)
}

pub fn format_key_values(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<(), IoError> {
    fs::write(path, format_key_values(pairs)).map_err(|e| IoError::file(path, e))
}
