//! Dense row-major tensors and the `.rten` raw tensor file format.
//!
//! A `.rten` file is `RTEN`, a version byte (1), a dtype byte (0 = f32,
//! 1 = f64), a rank byte, `rank` little-endian u64 dimensions and then the
//! little-endian payload.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use crate::error::{Error, Result};

pub const RTEN_MAGIC: &[u8; 4] = b"RTEN";
pub const RTEN_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Tensor`] can hold. `f32` is the working precision;
/// `f64` is used for gradient checking.
pub trait Float:
    num_like::Num
    + Copy
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + PartialOrd
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

// Arithmetic bound shared by f32 and f64, kept private to avoid pulling in
// a numeric-traits crate for four operators.
mod num_like {
    use std::ops::{Add, Div, Mul, Neg, Sub};
    pub trait Num:
        Add<Output = Self>
        + Sub<Output = Self>
        + Mul<Output = Self>
        + Div<Output = Self>
        + Neg<Output = Self>
        + Sized
    {
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
        fn ln_1p(self) -> Self;
        fn erf(self) -> Self;
    }
}

macro_rules! impl_float {
    ($t:ty, $dtype:expr, $n:expr, $erf:path) => {
        impl num_like::Num for $t {
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            fn erf(self) -> Self {
                $erf(self)
            }
        }

        impl Float for $t {
            const DTYPE: DType = $dtype;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $n];
                buf.copy_from_slice(&bytes[..$n]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_float!(f32, DType::F32, 4, libm::erff);
impl_float!(f64, DType::F64, 8, libm::erf);

/// Dense n-dimensional array, row-major. A rank-0 tensor (empty shape) holds
/// one scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&F> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds from `f64` values, converting to the tensor's precision.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shapes("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    /// Row `i` of the leading axis, as a tensor of the remaining shape.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        let Some((&outer, rest)) = self.shape.split_first() else {
            return Err(Error::dim("index_outer", "rank-0 tensor"));
        };
        if i >= outer {
            return Err(Error::dim("index_outer", format!("index {i} out of range {outer}")));
        }
        let inner = numel(rest);
        Ok(Self {
            shape: rest.to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<F>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack", "no tensors given"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shapes("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes to the `.rten` byte layout.
    pub fn to_rten_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 8 * self.rank() + self.len() * F::DTYPE.size());
        out.extend_from_slice(RTEN_MAGIC);
        out.push(RTEN_VERSION);
        out.push(F::DTYPE.code());
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses `.rten` bytes; a payload stored in the other precision is
    /// converted.
    pub fn from_rten_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 || &bytes[..4] != RTEN_MAGIC {
            return Err(Error::Format("missing RTEN magic".into()));
        }
        if bytes[4] != RTEN_VERSION {
            return Err(Error::Format(format!("unsupported rten version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])?;
        let rank = bytes[6] as usize;
        let mut pos = 7;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| Error::Format("truncated rten header".into()))?;
            shape.push(u64::from_le_bytes(chunk.try_into().expect("8 bytes")) as usize);
            pos += 8;
        }
        let n = numel(&shape);
        let payload = &bytes[pos..];
        if payload.len() != n * dtype.size() {
            return Err(Error::Format(format!(
                "rten payload is {} bytes, expected {}",
                payload.len(),
                n * dtype.size()
            )));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::read_le(c)))
                .collect(),
        };
        Tensor::new(&shape, data)
    }

    pub fn write_rten(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_rten_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_rten(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_rten_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn rten_header_layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = t.to_rten_bytes();
        assert_eq!(&bytes[..4], b"RTEN");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[7..15], &2u64.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 7 + 8 + 8);
    }

    #[test]
    fn rten_roundtrip_f64_and_cross_precision() {
        let t = Tensor::<f64>::new(&[1, 3], vec![0.1, -2.5, 1e-9]).unwrap();
        let back = Tensor::<f64>::from_rten_bytes(&t.to_rten_bytes()).unwrap();
        assert_eq!(t, back);
        let as32 = Tensor::<f32>::from_rten_bytes(&t.to_rten_bytes()).unwrap();
        assert_eq!(as32.data()[1], -2.5f32);
    }

    #[test]
    fn rten_rejects_bad_magic_and_truncation() {
        assert!(Tensor::<f32>::from_rten_bytes(b"RTEX\x01\x00\x00").is_err());
        let mut bytes = Tensor::<f32>::ones(&[4]).to_rten_bytes();
        bytes.pop();
        assert!(Tensor::<f32>::from_rten_bytes(&bytes).is_err());
    }
}
