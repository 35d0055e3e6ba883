//! OWT1: a minimal n-dimensional array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OWT1" | dtype: u8 | ndim: u8 | dims: ndim x u64 | payload (row-major)
//! ```
//!
//! dtype codes: 1 = u8, 2 = i32, 3 = f32, 4 = f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OWT1";
const HEADER_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    I32,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 1,
            DType::I32 => 2,
            DType::F32 => 3,
            DType::F64 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::U8),
            2 => Some(DType::I32),
            3 => Some(DType::F32),
            4 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

/// Dense row-major tensor. Construction validates `product(shape) == len(data)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Size("tensor shape must have at least one dimension".into()));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::Size(format!("{} dimensions exceed the format limit", shape.len())));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        if d == 0 {
            return Err(Error::Size("tensor extents must be >= 1".into()));
        }
        acc.checked_mul(d)
            .ok_or_else(|| Error::Size(format!("shape {shape:?} overflows")))
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = element_count(&shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values widened to f64 regardless of the stored dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Size in bytes of the serialized form.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.shape.len() + self.dtype().size() * self.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing OWT1 magic".into()));
        }
        let dtype = DType::from_code(bytes[4])
            .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        let dims_end = HEADER_LEN + 8 * ndim;
        if bytes.len() < dims_end {
            return Err(Error::Format("truncated dimension table".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| Error::Size(format!("extent {d} too large")))?;
            shape.push(d);
        }
        let n = element_count(&shape)?;
        let payload_len = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Size(format!("shape {shape:?} overflows")))?;
        let payload = &bytes[dims_end..];
        if payload.len() != payload_len {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                payload_len
            )));
        }
        let data = match dtype {
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, tensor.to_bytes())?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Tensor::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_2x3_file_is_46_bytes() {
        let t = Tensor::from_f32(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.to_bytes().len(), 46);
        assert_eq!(t.encoded_len(), 46);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(matches!(Tensor::from_f32(vec![], vec![]), Err(Error::Size(_))));
        assert!(matches!(Tensor::from_f32(vec![0, 2], vec![]), Err(Error::Size(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::from_i32(vec![3], vec![1, 2, 3]).unwrap();
        let mut bytes = t.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = t.to_bytes();
        assert!(matches!(
            Tensor::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn overflowing_dims_are_size_errors() {
        let mut bytes = b"OWT1".to_vec();
        bytes.push(4);
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Size(_))));
    }

    #[test]
    fn random_f64_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.owt");
        let data: Vec<f64> = (0..60).map(|i| (i as f64 * 0.731).sin() * 1e3).collect();
        let t = Tensor::from_f64(vec![3, 4, 5], data).unwrap();
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, t.encoded_len());
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(read_tensor("/nonexistent/x.owt"), Err(Error::NotFound(_))));
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop::collection::vec(1usize..5, 1..4), 0u8..4).prop_flat_map(|(shape, code)| {
            let n: usize = shape.iter().product();
            let shape2 = shape.clone();
            match code {
                0 => prop::collection::vec(any::<u8>(), n)
                    .prop_map(move |v| Tensor::from_u8(shape2.clone(), v).unwrap())
                    .boxed(),
                1 => prop::collection::vec(any::<i32>(), n)
                    .prop_map(move |v| Tensor::from_i32(shape2.clone(), v).unwrap())
                    .boxed(),
                2 => prop::collection::vec(any::<u32>(), n)
                    .prop_map(move |v| {
                        Tensor::from_f32(shape2.clone(), v.into_iter().map(f32::from_bits).collect())
                            .unwrap()
                    })
                    .boxed(),
                _ => prop::collection::vec(any::<u64>(), n)
                    .prop_map(move |v| {
                        Tensor::from_f64(shape2.clone(), v.into_iter().map(f64::from_bits).collect())
                            .unwrap()
                    })
                    .boxed(),
            }
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(t in arb_tensor()) {
            let bytes = t.to_bytes();
            prop_assert_eq!(bytes.len(), 6 + 8 * t.shape().len() + t.dtype().size() * t.len());
            let back = Tensor::from_bytes(&bytes).unwrap();
            // compare encodings so NaN payloads count as equal
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
