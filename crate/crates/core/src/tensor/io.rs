//! Binary tensor dumps.
//!
//! Layout, all little-endian: the magic `EAVT`, a `u32` rank, `rank` `u32`
//! dimensions, then the payload as packed `f32` or `f64` values. The
//! payload width is not tagged; it follows from the byte count left after
//! the header.

use std::fs;
use std::path::Path;

use super::{Precision, Real, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"EAVT";

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"EAVT\"")]
    BadMagic(Vec<u8>),
    #[error("truncated tensor dump: {0}")]
    Truncated(String),
    #[error("payload is {found}, expected {expected}")]
    PrecisionMismatch { expected: Precision, found: Precision },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A decoded tensor of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::Single(_) => Precision::Single,
            AnyTensor::Double(_) => Precision::Double,
        }
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * T::PRECISION.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, DumpError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DumpError::Truncated(format!("header ends at byte {at}")))
}

/// Parses the header, returning the shape and the payload offset.
fn header(bytes: &[u8]) -> Result<(Vec<usize>, usize), DumpError> {
    if bytes.len() < 4 {
        return Err(DumpError::Truncated("missing magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(DumpError::BadMagic(bytes[..4].to_vec()));
    }
    let rank = read_u32(bytes, 4)? as usize;
    let shape = (0..rank)
        .map(|i| read_u32(bytes, 8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((shape, 8 + 4 * rank))
}

fn payload<T: Real>(shape: Vec<usize>, body: &[u8]) -> Result<Tensor<T>, DumpError> {
    let w = T::PRECISION.bytes();
    let data = body.chunks_exact(w).map(T::read_le).collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Decodes a dump whose payload width is inferred from its length.
pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor, DumpError> {
    let (shape, off) = header(bytes)?;
    let numel: usize = shape.iter().product();
    let body = &bytes[off..];
    if body.len() == numel * 4 {
        Ok(AnyTensor::Single(payload(shape, body)?))
    } else if body.len() == numel * 8 {
        Ok(AnyTensor::Double(payload(shape, body)?))
    } else {
        Err(DumpError::Truncated(format!(
            "{} payload bytes for {numel} elements",
            body.len()
        )))
    }
}

/// Decodes a dump that must hold `T` values.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>, DumpError> {
    let any = decode_any(bytes)?;
    match (any, T::PRECISION) {
        (AnyTensor::Single(t), Precision::Single) => Ok(t.cast()),
        (AnyTensor::Double(t), Precision::Double) => Ok(t.cast()),
        (any, expected) => Err(DumpError::PrecisionMismatch {
            expected,
            found: any.precision(),
        }),
    }
}

pub fn save<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<(), DumpError> {
    Ok(fs::write(path, encode(t))?)
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyTensor, DumpError> {
    decode_any(&fs::read(path)?)
}
