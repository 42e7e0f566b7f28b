//! Dense row-major tensors and the ABST container format.
//!
//! Layout of an ABST file (all multi-byte values little-endian):
//!
//! | bytes        | field                         |
//! |--------------|-------------------------------|
//! | 4            | magic `ABST`                  |
//! | 1            | version, always 1             |
//! | 1            | dtype code (0 = f32, 1 = u8)  |
//! | 1            | rank                          |
//! | 8 × rank     | shape extents as u64          |
//! | remainder    | row-major payload             |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ABST";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::argument("tensor rank must be at least 1"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::argument(format!(
            "tensor extent {pos} is zero in shape {shape:?}"
        )));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::argument(format!("shape {shape:?} overflows")))?;
    if count != len {
        return Err(Error::argument(format!(
            "shape {shape:?} holds {count} elements but data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::U8(data),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::argument("expected f32 tensor, found u8")),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::argument("expected u8 tensor, found f32")),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(Error::argument("expected f32 tensor, found u8")),
        }
    }

    /// Returns a tensor sharing this payload under a new shape of equal size.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Fails if an f32 payload carries NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        if let TensorData::F32(v) = &self.data {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::invariant(format!(
                    "non-finite value {} at flat index {i}",
                    v[i]
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.len() * self.dtype().size();
        let mut out = Vec::with_capacity(7 + 8 * self.rank() + payload);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.rank() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |field: &'static str, detail: String| Error::Format { field, detail };

        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fmt("magic", format!("expected ABST, found {:?}", &bytes[..bytes.len().min(4)])));
        }
        let version = *bytes
            .get(4)
            .ok_or_else(|| fmt("version", "file ends before version byte".into()))?;
        if version != VERSION {
            return Err(fmt("version", format!("unsupported version {version}")));
        }
        let code = *bytes
            .get(5)
            .ok_or_else(|| fmt("dtype", "file ends before dtype byte".into()))?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| fmt("dtype", format!("unsupported dtype code {code}")))?;
        let rank = *bytes
            .get(6)
            .ok_or_else(|| fmt("rank", "file ends before rank byte".into()))? as usize;
        if rank == 0 {
            return Err(fmt("rank", "rank 0 is not supported".into()));
        }

        let header = 7 + 8 * rank;
        if bytes.len() < header {
            return Err(fmt(
                "shape",
                format!("need {} shape bytes, found {}", 8 * rank, bytes.len() - 7),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 7 + 8 * i;
            let raw = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            if raw == 0 {
                return Err(fmt("shape", format!("extent {i} is zero")));
            }
            let e = usize::try_from(raw)
                .map_err(|_| fmt("shape", format!("extent {i} = {raw} does not fit in memory")))?;
            shape.push(e);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| fmt("shape", format!("shape {shape:?} overflows")))?;
        let expected = count
            .checked_mul(dtype.size())
            .ok_or_else(|| fmt("shape", format!("shape {shape:?} overflows")))?;
        let payload = &bytes[header..];
        if payload.len() != expected {
            return Err(fmt(
                "payload",
                format!(
                    "shape {shape:?} needs {expected} bytes, found {}",
                    payload.len()
                ),
            ));
        }

        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&tensor.to_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_small_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.abst");
        let t = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn minimal_u8_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.abst");
        let t = Tensor::from_u8(vec![1], vec![0]).unwrap();
        write_tensor(&t, &path).unwrap();
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, 4 + 1 + 1 + 1 + 8 + 1);
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Tensor::from_u8(vec![1], vec![0]).unwrap().to_bytes();
        bytes[0] = b'X';
        match Tensor::from_bytes(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .to_bytes();
        bytes.pop();
        match Tensor::from_bytes(&bytes) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut bytes = Tensor::from_u8(vec![1], vec![0]).unwrap().to_bytes();
        bytes[5] = 9;
        match Tensor::from_bytes(&bytes) {
            Err(Error::Format { field, detail }) => {
                assert_eq!(field, "dtype");
                assert!(detail.contains('9'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_shape() {
        let bytes = Tensor::from_u8(vec![2, 2], vec![0; 4]).unwrap().to_bytes();
        match Tensor::from_bytes(&bytes[..12]) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "shape"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::from_f32(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_f32(vec![0, 3], vec![]).is_err());
        assert!(Tensor::from_f32(vec![], vec![]).is_err());
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=4)
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(shape in arb_shape(), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, including NaN payloads, must survive unchanged
            let data: Vec<f32> = (0..n as u32)
                .map(|i| f32::from_bits(i.wrapping_mul(2_654_435_761).wrapping_add(seed)))
                .collect();
            let t = Tensor::from_f32(shape.clone(), data.clone()).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.shape(), &shape[..]);
            let bits: Vec<u32> = back.as_f32().unwrap().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }

        #[test]
        fn u8_round_trip(shape in arb_shape(), fill in any::<u8>()) {
            let n: usize = shape.iter().product();
            let data: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_add(fill)).collect();
            let t = Tensor::from_u8(shape, data).unwrap();
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
