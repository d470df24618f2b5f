//! `PVT1` binary tensors.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "PVT1"
//! 4       4         dtype (u32 LE): 1 = f32, 2 = f64
//! 8       4         rank  (u32 LE)
//! 12      4 * rank  dims  (u32 LE each)
//! ..      n * size  payload, row-major, little-endian
//! ```
//!
//! No padding, no compression. A rank-0 tensor holds one scalar.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PVT1";
const HEADER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u32>,
    data: TensorData,
}

fn element_count(dims: &[u32]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::invalid("tensor", "element count overflows"))?;
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        };
        if n != len {
            return Err(Error::shape("tensor payload", n, len));
        }
        Ok(Tensor { dims, data })
    }

    /// Converts an array, storing it with `dtype` (f32 rounds to nearest).
    pub fn from_array(array: &ArrayD<f64>, dtype: Dtype) -> Result<Self> {
        let dims = array
            .shape()
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::invalid("tensor", format!("dimension {d} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        let values = array.iter().copied();
        let data = match dtype {
            Dtype::F32 => TensorData::F32(values.map(|v| v as f32).collect()),
            Dtype::F64 => TensorData::F64(values.collect()),
        };
        Tensor::new(dims, data)
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        ArrayD::from_shape_vec(IxDyn(&shape), self.to_f64()).expect("dims checked on construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.dims.len() + self.len() * self.dtype().size());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.dtype().code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = &bytes[..bytes.len().min(4)];
        if head != &MAGIC[..head.len()] {
            return Err(Error::BadMagic { found: head.to_vec() });
        }
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                what: "tensor header",
                needed: HEADER,
                available: bytes.len(),
            });
        }
        let dtype = Dtype::from_code(u32_at(bytes, 4))?;
        let rank = u32_at(bytes, 8) as usize;
        let dims_end = rank
            .checked_mul(4)
            .and_then(|n| n.checked_add(HEADER))
            .ok_or_else(|| Error::invalid("tensor header", "rank overflows"))?;
        if bytes.len() < dims_end {
            return Err(Error::Truncated {
                what: "tensor dims",
                needed: dims_end,
                available: bytes.len(),
            });
        }
        let dims: Vec<u32> = (0..rank).map(|i| u32_at(bytes, HEADER + 4 * i)).collect();
        let payload_len = element_count(&dims)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::invalid("tensor header", "payload size overflows"))?;
        let payload = &bytes[dims_end..];
        if payload.len() < payload_len {
            return Err(Error::Truncated {
                what: "tensor payload",
                needed: payload_len,
                available: payload.len(),
            });
        }
        if payload.len() > payload_len {
            return Err(Error::TrailingBytes {
                extra: payload.len() - payload_len,
            });
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::from_bytes(&read_bytes(path)?)
}

/// Concurrent writes to one path are not coordinated.
pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path, &tensor.to_bytes())
}
