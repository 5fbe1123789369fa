//! Dense row-major tensors and the `RPTENS01` binary layout.
//!
//! Layout (little-endian): magic `RPTENS01` (8 bytes), dtype code `u8`
//! (1 = f32, 2 = f64), rank `u8`, one `u32` per dimension, raw values.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"RPTENS01";

/// Scalar types that can be stored in tensor files.
pub trait Element: Copy + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: u8;
    const SIZE: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: u8 = 1;
    const SIZE: usize = 4;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: u8 = 2;
    const SIZE: usize = 8;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Floating-point scalar used by the network (f32 for training, f64 for
/// gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Element
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn c(x: f64) -> Self {
        x as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn c(x: f64) -> Self {
        x
    }

    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_array2(a: &Array2<F>) -> Self {
        let (r, c) = a.dim();
        Tensor {
            shape: vec![r, c],
            data: a.iter().copied().collect(),
        }
    }

    /// Rank-2 view of the data; rank-1 tensors become a single row.
    pub fn to_array2(&self) -> Result<Array2<F>> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Contract(format!(
                    "expected a rank-1 or rank-2 tensor, got shape {s:?}"
                )))
            }
        };
        Ok(Array2::from_shape_vec((r, c), self.data.clone()).expect("shape checked"))
    }

    /// Appends the `RPTENS01` encoding to `out`.
    pub fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Contract("tensor rank exceeds 255".into()));
        }
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(F::DTYPE);
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            let d = u32::try_from(*d)
                .map_err(|_| Error::Contract(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(self.data.len() * F::SIZE);
        for v in &self.data {
            v.put_le(out);
        }
        Ok(())
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| *v as f64).collect(),
        }
    }
}

/// A decoded tensor whose element type comes from the file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self, path: &Path) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::format(path, 8, "expected f32 tensor, found f64")),
        }
    }

    pub fn into_f64(self, path: &Path) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            AnyTensor::F32(_) => Err(Error::format(path, 8, "expected f64 tensor, found f32")),
        }
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::format(
            path,
            *pos as u64,
            format!("truncated {what}: need {n} bytes, {} left", bytes.len().saturating_sub(*pos)),
        ));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_values<F: Element>(bytes: &[u8], pos: &mut usize, shape: Vec<usize>, path: &Path) -> Result<Tensor<F>> {
    let n: usize = shape.iter().product();
    let raw = take(bytes, pos, n * F::SIZE, path, "tensor data")?;
    let data = raw.chunks_exact(F::SIZE).map(F::get_le).collect();
    Ok(Tensor { shape, data })
}

/// Decodes one tensor starting at `*pos`, advancing it past the tensor.
/// `path` is only used for error reporting.
pub fn decode_tensor(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<AnyTensor> {
    let start = *pos;
    let magic = take(bytes, pos, 8, path, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(path, start as u64, "bad tensor magic"));
    }
    let head = take(bytes, pos, 2, path, "tensor header")?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = take(bytes, pos, 4, path, "tensor dims")?;
        shape.push(u32::from_le_bytes(d.try_into().expect("4 bytes")) as usize);
    }
    match dtype {
        1 => Ok(AnyTensor::F32(read_values(bytes, pos, shape, path)?)),
        2 => Ok(AnyTensor::F64(read_values(bytes, pos, shape, path)?)),
        other => Err(Error::format(
            path,
            (start + 8) as u64,
            format!("unknown dtype code {other}"),
        )),
    }
}

pub fn write_tensor_file<F: Element>(path: &Path, t: &Tensor<F>) -> Result<()> {
    let mut buf = Vec::new();
    t.encode(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let t = decode_tensor(&bytes, &mut pos, path)?;
    if pos != bytes.len() {
        return Err(Error::format(
            path,
            pos as u64,
            format!("{} trailing bytes after tensor", bytes.len() - pos),
        ));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 2))
                .collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let mut buf = Vec::new();
            t.encode(&mut buf).unwrap();
            let mut pos = 0;
            let back = decode_tensor(&buf, &mut pos, Path::new("mem")).unwrap();
            prop_assert_eq!(pos, buf.len());
            let back = back.into_f64(Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1f32; 6]).unwrap();
        let mut buf = Vec::new();
        t.encode(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"RPTENS01");
        assert_eq!(buf[8], 1);
        assert_eq!(buf[9], 2);
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(&buf[14..18], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 18 + 24);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::new(vec![4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.encode(&mut buf).unwrap();
        let p = Path::new("x.bin");

        let mut pos = 0;
        let err = decode_tensor(&buf[..buf.len() - 3], &mut pos, p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("x.bin"));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, &mut 0, p).is_err());

        let mut bad = buf.clone();
        bad[8] = 7;
        assert!(decode_tensor(&bad, &mut 0, p).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0f32; 3]).is_err());
    }
}
