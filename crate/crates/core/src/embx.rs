//! `EMBX` binary tensor container.
//!
//! Layout, little-endian throughout:
//!
//! | offset | size        | field                          |
//! |--------|-------------|--------------------------------|
//! | 0      | 4           | magic `b"EMBX"`                |
//! | 4      | 4 (u32)     | version, currently `1`         |
//! | 8      | 4 (u32)     | dtype code                     |
//! | 12     | 4 (u32)     | `ndim`                         |
//! | 16     | 8·ndim (u64)| dims, outermost first          |
//! | ..     | payload     | row-major values               |
//!
//! dtype `0` is `f32` and is what every feature file uses. dtype `1` (`f64`)
//! is accepted for adapter checkpoints so trained weights round-trip exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMBX";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Parsed header of a container.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct Header {
    pub version: u32,
    pub dtype: DType,
    pub dims: Vec<u64>,
}

impl Header {
    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn byte_len(&self) -> usize {
        HEADER_FIXED + 8 * self.dims.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// An in-memory container: dims plus values.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub dims: Vec<u64>,
    pub payload: Payload,
}

impl Container {
    pub fn f32(dims: Vec<u64>, values: Vec<f32>) -> Self {
        Container {
            dims,
            payload: Payload::F32(values),
        }
    }

    pub fn f64(dims: Vec<u64>, values: Vec<f64>) -> Self {
        Container {
            dims,
            payload: Payload::F64(values),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f64`.
    pub fn values_f64(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let numel: u64 = self.dims.iter().product();
        assert_eq!(numel as usize, self.len(), "container dims disagree with payload");
        let dtype = self.dtype();
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.dims.len() + dtype.size() * self.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes a container; `path` is only used in diagnostics.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let header = decode_header(bytes, path)?;
        let start = header.byte_len();
        let expected = header.numel() * header.dtype.size();
        let body = &bytes[start..];
        if body.len() != expected {
            return Err(Error::Format {
                path: path.into(),
                reason: format!(
                    "payload is {} bytes, dims {:?} require {expected}",
                    body.len(),
                    header.dims
                ),
            });
        }
        let payload = match header.dtype {
            DType::F32 => {
                let v: Vec<f32> = body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { path: path.into(), index });
                }
                Payload::F32(v)
            }
            DType::F64 => {
                let v: Vec<f64> = body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { path: path.into(), index });
                }
                Payload::F64(v)
            }
        };
        Ok(Container {
            dims: header.dims,
            payload,
        })
    }
}

pub fn decode_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    if bytes.len() < HEADER_FIXED {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[0..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let code = u32_at(8);
    let dtype = DType::from_code(code).ok_or_else(|| bad(format!("unknown dtype code {code}")))?;
    let ndim = u32_at(12) as usize;
    let dims_end = HEADER_FIXED + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(bad(format!("truncated dims for ndim {ndim}")));
    }
    let dims = (0..ndim)
        .map(|i| {
            let off = HEADER_FIXED + 8 * i;
            u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
        })
        .collect();
    Ok(Header { version, dtype, dims })
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::decode(&bytes, path)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes, path)
}

pub fn write(path: &Path, container: &Container) -> Result<()> {
    fs::write(path, container.encode()).map_err(|e| Error::io(path, e))
}
