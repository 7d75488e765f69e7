//! Byte-level codecs for the `LTEN` tensor blob and the `LCKP` container.
//!
//! `LTEN`: magic `LTEN`, u16 version (1), u8 dtype (0 = F32, 1 = F64), u8 rank,
//! rank × u64 dims, then little-endian element data.
//!
//! `LCKP`: magic `LCKP`, u16 version (1), u32 entry count, then per entry a u16
//! name length, the UTF-8 name and the payload. Payloads are embedded `LTEN`
//! blobs, except for entries whose name ends in `.json`, which hold a u32 byte
//! length followed by UTF-8 JSON text.
//!
//! All integers are little-endian.

use alloc::string::String;
use alloc::vec::Vec;

use crate::tensor::{DType, Tensor};

pub const LTEN_MAGIC: [u8; 4] = *b"LTEN";
pub const LCKP_MAGIC: [u8; 4] = *b"LCKP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload")]
    Truncated,
    #[error("unknown dtype tag {0}")]
    UnknownDType(u8),
    #[error("invalid tensor header: {0}")]
    InvalidHeader(&'static str),
    #[error("entry name is not valid UTF-8")]
    InvalidUtf8,
    #[error("entry name too long")]
    NameTooLong,
    #[error("duplicate entry {0:?}")]
    DuplicateEntry(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<(), FormatError> {
        // A short file cannot have the right magic either; report it as truncated
        // only when what is present is a prefix of the magic.
        let present = &self.buf[self.pos..self.buf.len().min(self.pos + 4)];
        if present != &magic[..present.len()] {
            return Err(FormatError::BadMagic);
        }
        self.take(4)?;
        let version = self.u16()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(())
    }
}

pub fn encode_tensor(tensor: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&LTEN_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match tensor.dtype() {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    out.push(tensor.dims().len() as u8);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match tensor.dtype() {
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        DType::F64 => tensor
            .data()
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

pub fn tensor_to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(tensor, &mut out);
    out
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor, crate::Error> {
    r.header(LTEN_MAGIC)?;
    let dtype = match r.u8()? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(FormatError::UnknownDType(other).into()),
    };
    let rank = r.u8()? as usize;
    if rank > crate::tensor::MAX_RANK {
        return Err(FormatError::InvalidHeader("rank above 4").into());
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = usize::try_from(r.u64()?).map_err(|_| FormatError::InvalidHeader("dimension too large"))?;
        dims.push(d);
    }
    let shape = crate::tensor::Shape::new(&dims)
        .map_err(|_| FormatError::InvalidHeader("invalid dimensions"))?;
    let n = shape.numel();
    let bytes = n
        .checked_mul(dtype.size_of())
        .ok_or(FormatError::InvalidHeader("payload size overflows"))?;
    let raw = r.take(bytes)?;
    let data = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Tensor::from_vec_dtype(&dims, data, dtype)
}

/// Decodes exactly one `LTEN` blob; trailing bytes are an error.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor, crate::Error> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let t = read_tensor(&mut r)?;
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor(Tensor),
    Json(String),
}

/// Ordered, name-unique list of entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, entry: Entry) -> Result<(), FormatError> {
        if name.len() > u16::MAX as usize {
            return Err(FormatError::NameTooLong);
        }
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(FormatError::DuplicateEntry(name));
        }
        self.entries.push((name, entry));
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), FormatError> {
        let name = name.into();
        if name.ends_with(".json") {
            return Err(FormatError::InvalidHeader("tensor entry names must not end in .json"));
        }
        self.push(name, Entry::Tensor(tensor))
    }

    pub fn insert_json(&mut self, name: impl Into<String>, json: impl Into<String>) -> Result<(), FormatError> {
        let name = name.into();
        if !name.ends_with(".json") {
            return Err(FormatError::InvalidHeader("json entry names must end in .json"));
        }
        self.push(name, Entry::Json(json.into()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find_map(|(n, e)| match e {
            Entry::Tensor(t) if n == name => Some(t),
            _ => None,
        })
    }

    pub fn json(&self, name: &str) -> Option<&str> {
        self.entries.iter().find_map(|(n, e)| match e {
            Entry::Json(s) if n == name => Some(s.as_str()),
            _ => None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LCKP_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor(t) => encode_tensor(t, &mut out),
                Entry::Json(s) => {
                    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, crate::Error> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.header(LCKP_MAGIC)?;
        let count = r.u32()?;
        let mut container = Container::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name: String = core::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::InvalidUtf8)?
                .into();
            let entry = if is_json_name(&name) {
                let len = r.u32()? as usize;
                let text = core::str::from_utf8(r.take(len)?).map_err(|_| FormatError::InvalidUtf8)?;
                Entry::Json(text.into())
            } else {
                Entry::Tensor(read_tensor(&mut r)?)
            };
            container.push(name, entry)?;
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
        }
        Ok(container)
    }
}

fn is_json_name(name: &str) -> bool {
    name.ends_with(".json")
}
