//! Dense row-major tensors.
//!
//! `Tensor<f32>` is the value type for patches, activations, weights and
//! gradients. The same code is instantiated with `f64` for the shadow
//! forward passes used by gradient checks.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floating point element of a [`Tensor`].
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major `a: m×k` (or its transpose when
    /// `a_t`), `b: k×n` (or transposed when `b_t`) and `c: m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
}

/// Row/column strides of a row-major `rows×cols` matrix, optionally viewed
/// transposed.
fn strides(rows_of_view: usize, cols_of_view: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows_of_view as isize)
    } else {
        (cols_of_view as isize, 1)
    }
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        fn gemm(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, beta: $t, c: &mut [$t]) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
            let (rsa, csa) = strides(m, k, a_t);
            let (rsb, csb) = strides(k, n, b_t);
            // SAFETY: the asserted lengths cover every index addressed by the
            // given dimensions and strides.
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

impl Element for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Element for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    gemm_impl!(f64, matrixmultiply::dgemm);
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Right-hand side of an elementwise operation.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Multiply by a scalar operand.
    Scale,
    /// Absolute value; the operand is ignored.
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    /// Number of elements strictly greater than the threshold.
    CountGreater(f64),
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_, T>) -> Result<Self> {
        let binary = |f: fn(T, T) -> T| match rhs {
            Operand::Tensor(t) => self.zip_map(t, "elementwise", f),
            Operand::Scalar(s) => Ok(self.map(|v| f(v, s))),
        };
        match op {
            ElementwiseOp::Add => binary(|a, b| a + b),
            ElementwiseOp::Sub => binary(|a, b| a - b),
            ElementwiseOp::Mul | ElementwiseOp::Scale => binary(|a, b| a * b),
            ElementwiseOp::Abs => Ok(self.map(|v| v.abs())),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    /// `self += other`, in place.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn reduce(&self, op: Reduction) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Empty("reduce"));
        }
        Ok(match op {
            Reduction::Sum => self.sum_f64(),
            Reduction::Mean => self.sum_f64() / self.len() as f64,
            Reduction::Max => self
                .data
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max),
            Reduction::CountGreater(t) => {
                self.data.iter().filter(|v| v.as_f64() > t).count() as f64
            }
        })
    }

    pub fn sum(&self) -> Result<f64> {
        self.reduce(Reduction::Sum)
    }

    pub fn mean(&self) -> Result<f64> {
        self.reduce(Reduction::Mean)
    }

    pub fn max(&self) -> Result<f64> {
        self.reduce(Reduction::Max)
    }

    pub fn count_greater(&self, threshold: f64) -> Result<usize> {
        self.reduce(Reduction::CountGreater(threshold))
            .map(|c| c as usize)
    }

    /// Sum of squares, accumulated in f64.
    pub fn sum_sq(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum()
    }

    fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Contiguous sub-tensor `index` along the leading axis.
    pub fn outer(&self, index: usize) -> Result<Self> {
        let (&n, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::invalid("outer() on a rank-0 tensor"))?;
        if index >= n {
            return Err(Error::invalid(format!(
                "outer index {index} out of range for leading extent {n}"
            )));
        }
        let step = numel(rest);
        Ok(Tensor {
            shape: rest.to_vec(),
            data: self.data[index * step..(index + 1) * step].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.check_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

impl Tensor<f32> {
    /// I.i.d. normal samples with the given mean and standard deviation.
    pub fn gaussian(rng: &mut Rng, shape: &[usize], mean: f64, stddev: f64) -> Result<Self> {
        if !(stddev >= 0.0) || !stddev.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian stddev must be finite and >= 0, got {stddev}"
            )));
        }
        if stddev == 0.0 {
            return Ok(Tensor::full(shape, mean as f32));
        }
        Ok(Tensor::from_fn(shape, |_| (mean + stddev * rng.normal()) as f32))
    }
}
