//! FBT: a minimal little-endian f32 tensor container.
//!
//! ```text
//! "FBT1" | rank: u32 | dims: rank × u32 | values: Π dims × f32
//! ```
//!
//! All integers and floats are little-endian, values row-major. Files carry
//! nothing after the payload.

use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FBT1";

#[derive(Debug, thiserror::Error)]
pub enum FbtError {
    #[error("bad magic {0:?}, expected \"FBT1\"")]
    BadMagic([u8; 4]),
    #[error("truncated: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dimension product overflows")]
    DimOverflow,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims).ok_or_else(|| Error::Dimension(format!("dims {dims:?} overflow")))?;
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Dimension(format!("dims {dims:?} exceed u32")));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.dims.len() + 4 * tensor.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &tensor.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, FbtError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or(FbtError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, FbtError> {
    if bytes.len() < 4 {
        return Err(FbtError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(FbtError::BadMagic(magic));
    }
    let rank = read_u32(bytes, 4)? as usize;
    let header = rank
        .checked_mul(4)
        .and_then(|r| r.checked_add(8))
        .ok_or(FbtError::DimOverflow)?;
    if bytes.len() < header {
        return Err(FbtError::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 8 + 4 * i).map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let count = element_count(&dims).ok_or(FbtError::DimOverflow)?;
    let total = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or(FbtError::DimOverflow)?;
    if bytes.len() < total {
        return Err(FbtError::Truncated {
            expected: total,
            actual: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(FbtError::TrailingBytes(bytes.len() - total));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn read_fbt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Fbt {
        path: path.to_path_buf(),
        source: FbtError::Io(e),
    })?;
    decode(&bytes).map_err(|source| Error::Fbt {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_fbt(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode(tensor))
}
