//! DTF: a little-endian container of named dense tensors.
//!
//! ```text
//! file       := record* name_table?
//! record     := "DTF1" dtype:u8 rank:u8 dims:u32le*rank payload
//! name_table := "DTFN" count:u32le (len:u32le utf8-bytes)*count
//! ```
//!
//! `dtype` is 0 for f32, 1 for f64, 2 for u8. Without a name table the
//! records are named `"0"`, `"1"`, ... in file order.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const RECORD_MAGIC: &[u8; 4] = b"DTF1";
pub const NAMES_MAGIC: &[u8; 4] = b"DTFN";
pub const MAX_DTF_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DtfError {
    #[error("bad magic {found:?} at byte {offset}")]
    BadMagic { offset: usize, found: Vec<u8> },

    #[error("unknown dtype code {code} at byte {offset}")]
    BadDtype { offset: usize, code: u8 },

    #[error("rank {rank} at byte {offset} exceeds {MAX_DTF_RANK}")]
    BadRank { offset: usize, rank: usize },

    #[error("truncated at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated { offset: usize, expected: u64, actual: u64 },

    #[error("dims at byte {offset} overflow the addressable size")]
    DimOverflow { offset: usize },

    #[error("name table at byte {offset} lists {names} names for {records} records")]
    NameCount { offset: usize, names: usize, records: usize },

    #[error("invalid utf-8 name at byte {offset}")]
    BadName { offset: usize },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("trailing bytes after name table at byte {offset}")]
    TrailingBytes { offset: usize },

    #[error("tensor `{name}`: {reason}")]
    Content { name: String, reason: String },
}

impl DtfError {
    /// Stable machine-readable identifier of the failure class.
    pub fn code(&self) -> &'static str {
        match self {
            DtfError::BadMagic { .. } => "bad_magic",
            DtfError::BadDtype { .. } => "bad_dtype",
            DtfError::BadRank { .. } => "bad_rank",
            DtfError::Truncated { .. } => "truncated",
            DtfError::DimOverflow { .. } => "dim_overflow",
            DtfError::NameCount { .. } => "name_count",
            DtfError::BadName { .. } => "bad_name",
            DtfError::DuplicateName(_) => "duplicate_name",
            DtfError::TrailingBytes { .. } => "trailing_bytes",
            DtfError::Content { .. } => "content",
        }
    }

    /// Byte offset the error refers to, when it has one.
    pub fn offset(&self) -> Option<usize> {
        match *self {
            DtfError::BadMagic { offset, .. }
            | DtfError::BadDtype { offset, .. }
            | DtfError::BadRank { offset, .. }
            | DtfError::Truncated { offset, .. }
            | DtfError::DimOverflow { offset }
            | DtfError::NameCount { offset, .. }
            | DtfError::BadName { offset }
            | DtfError::TrailingBytes { offset } => Some(offset),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DtfData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl DtfData {
    pub fn dtype(&self) -> Dtype {
        match self {
            DtfData::F32(_) => Dtype::F32,
            DtfData::F64(_) => Dtype::F64,
            DtfData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DtfData::F32(v) => v.len(),
            DtfData::F64(v) => v.len(),
            DtfData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One stored array. Bit patterns (including NaN payloads) are preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct DtfTensor {
    pub shape: Vec<usize>,
    pub data: DtfData,
}

impl DtfTensor {
    pub fn new(shape: Vec<usize>, data: DtfData) -> std::result::Result<Self, DtfError> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if shape.len() > MAX_DTF_RANK || n != Some(data.len()) {
            return Err(DtfError::Content {
                name: String::new(),
                reason: format!("shape {shape:?} does not hold {} values", data.len()),
            });
        }
        Ok(DtfTensor { shape, data })
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            Dtype::F64 => DtfData::F64(t.to_f64_vec()),
            _ => DtfData::F32(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
        };
        DtfTensor { shape: t.shape().to_vec(), data }
    }

    pub fn from_u8(shape: Vec<usize>, bytes: Vec<u8>) -> std::result::Result<Self, DtfError> {
        DtfTensor::new(shape, DtfData::U8(bytes))
    }

    /// Converts to a float tensor of any precision.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let vals: Vec<T> = match &self.data {
            DtfData::F32(v) => v.iter().map(|&x| T::from_f32(x).unwrap_or_else(T::nan)).collect(),
            DtfData::F64(v) => v.iter().map(|&x| T::from_f64(x).unwrap_or_else(T::nan)).collect(),
            DtfData::U8(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
        };
        Tensor::new(&self.shape, vals)
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            DtfData::U8(v) => Some(v),
            _ => None,
        }
    }
}

pub type Named = Vec<(String, DtfTensor)>;

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_record(out: &mut Vec<u8>, t: &DtfTensor) -> Result<()> {
    out.extend_from_slice(RECORD_MAGIC);
    out.push(t.data.dtype().code());
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        push_u32(out, d, "dimension")?;
    }
    match &t.data {
        DtfData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        DtfData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        DtfData::U8(v) => out.extend_from_slice(v),
    }
    Ok(())
}

/// Records followed by a name table.
pub fn encode(items: &[(String, DtfTensor)]) -> Result<Vec<u8>> {
    let mut out = encode_unnamed(items.iter().map(|(_, t)| t))?;
    out.extend_from_slice(NAMES_MAGIC);
    push_u32(&mut out, items.len(), "tensor count")?;
    for (name, _) in items {
        push_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
    }
    Ok(out)
}

/// Records only, no name table.
pub fn encode_unnamed<'a>(items: impl IntoIterator<Item = &'a DtfTensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in items {
        if t.shape.len() > MAX_DTF_RANK {
            return Err(DtfError::BadRank { offset: out.len() + 5, rank: t.shape.len() }.into());
        }
        encode_record(&mut out, t)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> std::result::Result<&'a [u8], DtfError> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(DtfError::Truncated { offset: self.pos, expected: n, actual: remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, DtfError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Named, DtfError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut records = Vec::new();
    if bytes.is_empty() {
        return Err(DtfError::Truncated { offset: 0, expected: 4, actual: 0 });
    }
    while cur.pos < bytes.len() {
        let at = cur.pos;
        let magic = cur.take(4)?;
        if magic == NAMES_MAGIC {
            let count = cur.u32()? as usize;
            if count != records.len() {
                return Err(DtfError::NameCount { offset: at, names: count, records: records.len() });
            }
            let mut named = Vec::with_capacity(count);
            for t in records {
                let len_at = cur.pos;
                let len = cur.u32()? as u64;
                let name = std::str::from_utf8(cur.take(len)?)
                    .map_err(|_| DtfError::BadName { offset: len_at + 4 })?
                    .to_string();
                if named.iter().any(|(n, _)| n == &name) {
                    return Err(DtfError::DuplicateName(name));
                }
                named.push((name, t));
            }
            if cur.pos != bytes.len() {
                return Err(DtfError::TrailingBytes { offset: cur.pos });
            }
            return Ok(named);
        }
        if magic != RECORD_MAGIC {
            return Err(DtfError::BadMagic { offset: at, found: magic.to_vec() });
        }
        let head = cur.take(2)?;
        let dtype = Dtype::from_code(head[0]).ok_or(DtfError::BadDtype { offset: at + 4, code: head[0] })?;
        let rank = head[1] as usize;
        if rank > MAX_DTF_RANK {
            return Err(DtfError::BadRank { offset: at + 5, rank });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let payload_at = cur.pos;
        let n = shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .filter(|&b| usize::try_from(b).is_ok())
            .ok_or(DtfError::DimOverflow { offset: at + 6 })?;
        let payload = cur.take(n)?;
        let data = match dtype {
            Dtype::F32 => DtfData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::F64 => DtfData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::U8 => DtfData::U8(payload.to_vec()),
        };
        debug_assert!(payload_at + n as usize == cur.pos);
        records.push(DtfTensor { shape, data });
    }
    Ok(records.into_iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect())
}

/// Writes `bytes` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn dtf_write(path: impl AsRef<Path>, items: &[(String, DtfTensor)]) -> Result<()> {
    write_atomic(path.as_ref(), &encode(items)?)
}

pub fn dtf_read(path: impl AsRef<Path>) -> Result<Named> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Writes a single tensor as one bare record.
pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_unnamed([&DtfTensor::from_tensor(t)])?)
}

/// Reads a file holding exactly one tensor.
pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let mut items = dtf_read(path)?;
    if items.len() != 1 {
        return Err(Error::Data(format!("{}: expected one tensor, found {}", path.display(), items.len())));
    }
    items.remove(0).1.to_tensor()
}
