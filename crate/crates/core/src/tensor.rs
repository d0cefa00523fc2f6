//! Dense `f32` tensors and the SLTR byte format.
//!
//! SLTR layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SLTR" (53 4C 54 52)
//! 4       2           u16 version = 1
//! 6       1           u8 rank, 1..=4
//! 7       4 * rank    u32 dims, outermost first
//! ..      4 * prod    f32 data, row-major
//! ```

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SLTR";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking rank, extents, length and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::InvalidTensor(format!(
                "data length {} does not match dims {:?} (product {})",
                data.len(),
                dims,
                expected
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self { dims, data })
    }

    /// Converts from `f64`, rounding to the nearest `f32`.
    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims)?;
        let len = dims.iter().product();
        Ok(Self { dims, data: alloc::vec![0.0; len] })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Size in bytes of the SLTR encoding of a tensor with `dims`.
    pub fn encoded_len(dims: &[usize]) -> usize {
        4 + 2 + 1 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(&self.dims));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = bytes.get(..7).ok_or(Error::Truncated { expected: 7, found: bytes.len() })?;
        let magic = [header[0], header[1], header[2], header[3]];
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let rank = usize::from(header[6]);
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::BadRank(rank));
        }
        let dims_end = 7 + 4 * rank;
        let dim_bytes = bytes.get(7..dims_end).ok_or(Error::Truncated { expected: dims_end, found: bytes.len() })?;
        let dims: Vec<usize> =
            dim_bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
        check_dims(&dims)?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidTensor(format!("dims {dims:?} overflow")))?;
        let expected = count
            .checked_mul(4)
            .and_then(|b| b.checked_add(dims_end))
            .ok_or_else(|| Error::InvalidTensor(format!("dims {dims:?} overflow")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes(bytes.len() - expected));
        }
        let data = bytes[dims_end..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(dims, data)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::BadRank(dims.len()));
    }
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::InvalidTensor(format!("dims {dims:?} must be positive and fit in u32")));
    }
    Ok(())
}
