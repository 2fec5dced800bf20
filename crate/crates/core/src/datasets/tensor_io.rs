//! VCFT portable tensor files.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "VCFT"
//! 4       4         version, u32 little-endian (currently 1)
//! 8       1         dtype code: 0 = f32, 1 = f64, 2 = i32, 3 = u8
//! 9       1         rank r
//! 10      8 * r     dims, u64 little-endian each
//! ...               payload, row-major, little-endian elements
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VCFT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
    U8 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::U8,
            other => return Err(Error::CorruptHeader(format!("unknown dtype code {other}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I32(ArrayD<i32>),
    U8(ArrayD<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
            TensorData::I32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            TensorData::F64(a) => Ok(a),
            TensorData::F32(a) => Ok(a.mapv(f64::from)),
            other => Err(Error::shape(format!("expected float tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_i32(self) -> Result<ArrayD<i32>> {
        match self {
            TensorData::I32(a) => Ok(a),
            other => Err(Error::shape(format!("expected i32 tensor, got {:?}", other.dtype()))),
        }
    }

    pub fn into_u8(self) -> Result<ArrayD<u8>> {
        match self {
            TensorData::U8(a) => Ok(a),
            other => Err(Error::shape(format!("expected u8 tensor, got {:?}", other.dtype()))),
        }
    }
}

impl From<ArrayD<f64>> for TensorData {
    fn from(a: ArrayD<f64>) -> Self {
        TensorData::F64(a)
    }
}

impl From<ArrayD<i32>> for TensorData {
    fn from(a: ArrayD<i32>) -> Self {
        TensorData::I32(a)
    }
}

impl From<ArrayD<u8>> for TensorData {
    fn from(a: ArrayD<u8>) -> Self {
        TensorData::U8(a)
    }
}

impl From<ArrayD<f32>> for TensorData {
    fn from(a: ArrayD<f32>) -> Self {
        TensorData::F32(a)
    }
}

pub fn encode(t: &TensorData) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidParameter(format!("rank {} too large", shape.len())));
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(10 + 8 * shape.len() + n * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype() as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        TensorData::F32(a) => {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("non-finite value in tensor".into()));
            }
            a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        TensorData::F64(a) => {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("non-finite value in tensor".into()));
            }
            a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        TensorData::I32(a) => a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(a) => out.extend(a.iter().copied()),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Decode one tensor, returning it with the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(TensorData, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic(String::from_utf8_lossy(magic).into_owned()));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(cur.take(1, "dtype")?[0])?;
    let rank = cur.take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8, "dims")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::CorruptHeader("dim overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::CorruptHeader("element count overflow".into()))?;
    let nbytes = n
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::CorruptHeader("payload size overflow".into()))?;
    let payload = cur.take(nbytes, "payload")?;
    let dims = IxDyn(&shape);
    let data = match dtype {
        DType::F32 => TensorData::F32(
            ArrayD::from_shape_vec(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("length checked"),
        ),
        DType::F64 => TensorData::F64(
            ArrayD::from_shape_vec(
                dims,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("length checked"),
        ),
        DType::I32 => TensorData::I32(
            ArrayD::from_shape_vec(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .expect("length checked"),
        ),
        DType::U8 => TensorData::U8(ArrayD::from_shape_vec(dims, payload.to_vec()).expect("length checked")),
    };
    Ok((data, cur.pos))
}

/// Decode a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<TensorData> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_f64(path: &Path) -> Result<ArrayD<f64>> {
    read_tensor(path)?.into_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;

    #[test]
    fn round_trip_3x4x5() {
        let a = Array::from_shape_fn(IxDyn(&[3, 4, 5]), |ix| {
            (ix[0] * 20 + ix[1] * 5 + ix[2]) as f64 * 0.1 - 1.7
        });
        let t = TensorData::F64(a);
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn scalar_round_trip() {
        let t = TensorData::F64(ArrayD::from_elem(IxDyn(&[]), std::f64::consts::PI));
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes.len(), 10 + 8);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn header_layout_is_exact() {
        let t = TensorData::I32(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1, -1]).unwrap());
        let bytes = encode(&t).unwrap();
        assert_eq!(
            bytes,
            [
                b'V', b'C', b'F', b'T', 1, 0, 0, 0, 2, 1, 2, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0,
                0xff, 0xff, 0xff, 0xff
            ]
        );
    }

    #[test]
    fn truncation_is_reported_not_panicked() {
        let t = TensorData::F64(ArrayD::zeros(IxDyn(&[4, 4])));
        let bytes = encode(&t).unwrap();
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptHeader(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&TensorData::U8(ArrayD::zeros(IxDyn(&[1])))).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
        bytes[0] = b'V';
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn non_finite_rejected() {
        let t = TensorData::F64(ArrayD::from_elem(IxDyn(&[1]), f64::NAN));
        assert!(encode(&t).is_err());
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..4, 0..=5)
    }

    proptest! {
        #[test]
        fn every_dtype_and_rank_round_trips(shape in shape_strategy(), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut state = seed;
            let mut next = || { state = crate::rng::splitmix64(state); state };
            let dims = IxDyn(&shape);
            let cases = vec![
                TensorData::F64(ArrayD::from_shape_vec(dims.clone(), (0..n).map(|_| f64::from_bits(next() >> 2)).collect()).unwrap()),
                TensorData::F32(ArrayD::from_shape_vec(dims.clone(), (0..n).map(|_| (next() as i64 as f64 * 1e-12) as f32).collect()).unwrap()),
                TensorData::I32(ArrayD::from_shape_vec(dims.clone(), (0..n).map(|_| next() as i32).collect()).unwrap()),
                TensorData::U8(ArrayD::from_shape_vec(dims, (0..n).map(|_| next() as u8).collect()).unwrap()),
            ];
            for t in cases {
                let back = decode(&encode(&t).unwrap()).unwrap();
                prop_assert_eq!(&back, &t);
                prop_assert_eq!(encode(&back).unwrap(), encode(&t).unwrap());
            }
        }
    }
}
