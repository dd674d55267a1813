//! TNSR binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "TNSR"
//! 4       1         version (0x01)
//! 5       1         dtype (0 = f32, 1 = i8, 2 = f64)
//! 6       1         rank
//! 7       3         reserved, zero
//! 10      4*rank    u32 extents
//! ...     n*size    row-major payload, last axis fastest
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 10;

/// A decoded TNSR record of any supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::I8(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Float view at precision `S`; int8 records are rejected.
    pub fn into_real<S: Real>(self) -> Result<Tensor<S>> {
        match self {
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::F64(t) => Ok(t.cast()),
            AnyTensor::I8(_) => Err(Error::Format("expected a float tensor, found int8".into())),
        }
    }

    pub fn into_i8(self) -> Result<Tensor<i8>> {
        match self {
            AnyTensor::I8(t) => Ok(t),
            _ => Err(Error::Format("expected an int8 tensor".into())),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(rank);
    out.extend_from_slice(&[0, 0, 0]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes one record from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated TNSR header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TNSR".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported TNSR version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype byte {}", bytes[5])))?;
    let rank = bytes[6] as usize;
    if bytes[7..10] != [0, 0, 0] {
        return Err(Error::Format("reserved bytes must be zero".into()));
    }
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated TNSR extents".into()));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let end = dims_end + count * dtype.size();
    if bytes.len() < end {
        return Err(Error::Format("truncated TNSR payload".into()));
    }
    let payload = &bytes[dims_end..end];
    let any = match dtype {
        DType::F32 => AnyTensor::F32(read_payload(&shape, payload)?),
        DType::I8 => AnyTensor::I8(read_payload(&shape, payload)?),
        DType::F64 => AnyTensor::F64(read_payload(&shape, payload)?),
    };
    Ok((any, end))
}

fn read_payload<T: Element>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn write_file<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{}: trailing bytes after TNSR record", path.display())));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<i8>::from_vec(&[2, 1], vec![-1, 5]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(
            bytes,
            vec![b'T', b'N', b'S', b'R', 1, 1, 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0xff, 5]
        );
    }

    #[test]
    fn f32_payload_is_little_endian() {
        let t = Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[14..], &1.0f32.to_le_bytes());
        assert_eq!(bytes[5], 0);
    }

    #[test]
    fn rejects_unknown_magic_version_and_dtype() {
        let t = Tensor::<f64>::zeros(&[3]);
        let good = encode(&t).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 9;
        assert!(decode(&bad).is_err());
        let mut bad = good;
        bad.pop();
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tnsr");
        let t = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap();
        write_file(&path, &t).unwrap();
        assert_eq!(read_file(&path).unwrap(), AnyTensor::F64(t));
    }
}
