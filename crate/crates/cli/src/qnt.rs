//! QNT1 binary tensors: magic `QNT1`, a dtype byte (0 = f32, 1 = f64), a
//! little-endian u32 rank, u32 extents, then the little-endian row-major
//! payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use marnet_core::real::Real;
use marnet_core::tensor::Tensor;

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"QNT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(IoError::Format(format!("unknown QNT1 dtype code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor as stored on disk, before any precision conversion.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

/// Tags the element type of a [`Real`] for serialization.
pub fn dtype_of<T: Real>() -> DType {
    if core::mem::size_of::<T>() == 4 {
        DType::F32
    } else {
        DType::F64
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let dtype = dtype_of::<T>();
    let mut out = Vec::with_capacity(9 + 4 * t.ndim() + dtype.size() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(IoError::Format("truncated QNT1 data".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn u32_at(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

/// Decodes one tensor from the front of `buf`, advancing it.
pub fn decode_from(buf: &mut &[u8]) -> Result<StoredTensor> {
    if take(buf, 4)? != MAGIC {
        return Err(IoError::Format("missing QNT1 magic".into()));
    }
    let dtype = DType::from_code(take(buf, 1)?[0])?;
    let ndim = u32_at(buf)? as usize;
    let shape = (0..ndim).map(|_| u32_at(buf).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| IoError::Format("QNT1 extents overflow".into()))?;
    let payload = take(buf, count.checked_mul(dtype.size()).ok_or_else(|| IoError::Format("QNT1 payload overflow".into()))?)?;
    Ok(match dtype {
        DType::F32 => StoredTensor::F32(Tensor::new(
            &shape,
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
        )?),
        DType::F64 => StoredTensor::F64(Tensor::new(
            &shape,
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        )?),
    })
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(mut buf: &[u8]) -> Result<StoredTensor> {
    let t = decode_from(&mut buf)?;
    if !buf.is_empty() {
        return Err(IoError::Format(format!("{} trailing bytes after QNT1 tensor", buf.len())));
    }
    Ok(t)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| IoError::at(path, e))?;
    f.write_all(&encode(t)).map_err(|e| IoError::at(path, e))
}

pub fn read(path: &Path) -> Result<StoredTensor> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| IoError::at(path, e))?;
    decode(&buf).map_err(|e| e.context(path))
}

/// Reads a tensor and converts it to `T`.
pub fn read_as<T: Real>(path: &Path) -> Result<Tensor<T>> {
    Ok(read(path)?.cast())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_byte_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"QNT1");
        assert_eq!(b[4], 0);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..17], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn round_trip_both_precisions() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64).sin() * 1e-3);
        assert_eq!(decode(&encode(&a)).unwrap(), StoredTensor::F64(a.clone()));
        let s = Tensor::<f32>::from_fn(&[5], |i| i as f32 / 3.0);
        assert_eq!(decode(&encode(&s)).unwrap(), StoredTensor::F32(s));
        let scalar = Tensor::<f64>::scalar(2.5);
        assert_eq!(decode(&encode(&scalar)).unwrap().cast::<f64>(), scalar);
    }

    #[test]
    fn rejects_malformed_input() {
        let t = Tensor::<f32>::ones(&[3]);
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut code = b.clone();
        code[4] = 7;
        assert!(decode(&code).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
