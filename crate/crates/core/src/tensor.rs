//! Dense row-major tensors.
//!
//! Activations use the `(batch, channel, height, width)` layout. Float tensors
//! are generic over [`Real`] so the same code runs at `f32` (training) and
//! `f64` (gradient checks and bit-reproducible runs).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use num_like::FloatOps;

use crate::error::{Error, Result};

/// Element type tag, matching the TNSR dtype byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I8,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
            DType::F64 => 8,
        }
    }
}

/// Storable tensor element.
pub trait Element: Copy + Default + Debug + PartialEq + Send + Sync + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Element for i8 {
    const DTYPE: DType = DType::I8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self as u8);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0] as i8
    }
}

pub mod num_like {
    /// The handful of float operations the kernels need.
    pub trait FloatOps: Sized {
        fn sqrt(self) -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn min(self, other: Self) -> Self;
        #[allow(clippy::wrong_self_convention)]
    fn is_finite(self) -> bool;
        fn powi(self, n: i32) -> Self;
    }

    macro_rules! impl_float_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                fn ln(self) -> Self {
                    <$t>::ln(self)
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
                fn powi(self, n: i32) -> Self {
                    <$t>::powi(self, n)
                }
            }
        };
    }

    impl_float_ops!(f32);
    impl_float_ops!(f64);
}

/// Floating-point scalar used by every differentiable kernel.
///
/// Accumulation happens in `Self`, so `f64` tensors accumulate in double
/// precision and `f32` tensors in single precision.
pub trait Real:
    Element
    + FloatOps
    + PartialOrd
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with contiguous row-major storage (last axis fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Input(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extent of `axis`, or a dimension error naming `op`.
    pub fn dim(&self, op: &'static str, axis: usize) -> Result<usize> {
        self.shape.get(axis).copied().ok_or(Error::Dimension {
            op,
            axis: axis.to_string(),
            expected: axis + 1,
            got: self.shape.len(),
        })
    }

    /// The 4 extents of an NCHW tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension { op, axis: "rank".into(), expected: 4, got: self.rank() }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, c] => Ok((n, c)),
            _ => Err(Error::Dimension { op, axis: "rank".into(), expected: 2, got: self.rank() }),
        }
    }

    /// Copies out sample `n` along the leading axis, keeping a leading 1.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[n * per..(n + 1) * per].to_vec() }
    }

    /// Concatenates tensors along the leading axis; trailing extents must agree.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Input(format!(
                    "stack: trailing shape {:?} differs from {:?}",
                    &p.shape[1..],
                    tail
                )));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl<S: Real> Tensor<S> {
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::from_f64(v.to_f64()))
    }

    pub fn scale(&self, a: S) -> Tensor<S> {
        self.map(|v| v * a)
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_same_shape("add", other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Per-row argmax of an `(N, C)` tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let c = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(c.max(1))
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            let axis = self
                .shape
                .iter()
                .zip(&other.shape)
                .position(|(a, b)| a != b)
                .unwrap_or(self.shape.len().min(other.shape.len()));
            return Err(Error::Dimension {
                op,
                axis: axis.to_string(),
                expected: self.shape.get(axis).copied().unwrap_or(0),
                got: other.shape.get(axis).copied().unwrap_or(0),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn stack_and_sample_are_inverse() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.sample(0), a);
        assert_eq!(s.sample(1), b);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![0, 2]);
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 4]);
        match a.add(&b) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
