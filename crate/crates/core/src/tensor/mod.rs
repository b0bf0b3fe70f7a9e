//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is plain data: a shape and a contiguous buffer. Differentiable
//! computation happens through [`Graph`] and its [`Var`] handles, which record
//! every primitive so that [`Graph::backward`] can replay them in reverse.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and `f64` for finite-difference gradient checks.
//!
//! All reductions run in a fixed sequential order, so identical inputs give
//! bitwise identical outputs.

pub mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use thiserror::Error;

pub use tape::{Gradients, Graph, Var};

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + DivAssign + Sum
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::lit(v as f64)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    Size { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// An n-dimensional array of scalars stored contiguously in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::NAME, self.shape)?;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Size { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` literals, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
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

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Sum of squares, accumulated sequentially in `f64`.
    pub fn sum_squares(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            let v = v.as_f64();
            acc += v * v;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(d.data.iter().fold(0.0, |m, v| m.max(v.abs().as_f64())))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        kernels::matmul(self, other)
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        kernels::transpose_last2(self)
    }

    pub fn softmax_lastdim(&self) -> Result<Self> {
        kernels::softmax_lastdim(self)
    }

    pub fn silu(&self) -> Self {
        self.map(kernels::silu_scalar)
    }

    pub fn rms_norm(&self, gain: &Self, eps: T) -> Result<Self> {
        kernels::rms_norm(self, gain, eps).map(|(y, _)| y)
    }

    pub fn concat_lastdim(&self, other: &Self) -> Result<Self> {
        kernels::concat_lastdim(self, other)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        kernels::narrow(self, axis, start, len)
    }
}

/// Fails if any element is NaN or infinite.
#[inline]
pub(crate) fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if !t.is_finite() {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Size { len: 5, .. }));
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = Tensor::<f32>::from_f64([2, 2], &[1.0, -2.0, 3.5, 0.25]).unwrap();
        assert_eq!(x.add(&Tensor::zeros([2, 2])).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([3, 2]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn cast_roundtrip() {
        let x = Tensor::<f32>::from_f64([3], &[0.5, -1.25, 2.0]).unwrap();
        assert_eq!(x.cast::<f64>().cast::<f32>(), x);
    }
}
