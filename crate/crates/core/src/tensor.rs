//! Dense row-major tensors over `f32` (training) or `f64` (gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use thiserror::Error;

/// Scalar element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(value: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` for an `m x k` matrix `a` and a `k x n` matrix
    /// `b`, each given as a slice plus (row, column) strides. `c` is dense
    /// row-major `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, beta: Self, c: &mut [Self]);
}

/// (row stride, column stride) in elements.
pub type Strides = (usize, usize);

fn check_gemm(m: usize, k: usize, n: usize, a: usize, sa: Strides, b: usize, sb: Strides, c: usize) {
    let last = |rows: usize, cols: usize, (rs, cs): Strides| (rows - 1) * rs + (cols - 1) * cs;
    assert!(m > 0 && k > 0 && n > 0, "gemm: empty operand");
    assert!(last(m, k, sa) < a && last(k, n, sb) < b && m * n <= c, "gemm: operand out of bounds");
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        #[inline]
        fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: Strides, b: &[Self], sb: Strides, beta: Self, c: &mut [Self]) {
            check_gemm(m, k, n, a.len(), sa, b.len(), sb, c.len());
            // SAFETY: check_gemm bounds every index the kernel touches.
            unsafe {
                $f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    sa.0 as isize,
                    sa.1 as isize,
                    b.as_ptr(),
                    sb.0 as isize,
                    sb.1 as isize,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                )
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn from_f64(value: f64) -> Self {
        value as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    gemm_impl!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    #[inline]
    fn from_f64(value: f64) -> Self {
        value
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    gemm_impl!(f64, matrixmultiply::dgemm);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid configuration: {reason}")]
    InvalidSpec { op: &'static str, reason: String },
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("holds {} elements but data has {}", numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        expect_same_shape("add_assign", &self.shape, &other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Inner product accumulated in `f64`, index order.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        expect_same_shape("dot", &self.shape, &other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a.as_f64() * b.as_f64()))
    }

    /// Mean of all elements, summed in `f64` in index order.
    pub fn mean(&self) -> f64 {
        let sum = self.data.iter().fold(0.0, |acc, &v| acc + v.as_f64());
        sum / self.data.len() as f64
    }

    pub fn max(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| a.max(b))
    }
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 5 {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 5".into(),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "all extents must be at least 1".into(),
        });
    }
    Ok(())
}

pub(crate) fn expect_same_shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "rank".into(),
            expected: expected.len(),
            actual: actual.len(),
        });
    }
    for (axis, (&e, &a)) in expected.iter().zip(actual).enumerate() {
        if e != a {
            return Err(TensorError::ShapeMismatch {
                op,
                axis: format!("axis {axis}"),
                expected: e,
                actual: a,
            });
        }
    }
    Ok(())
}

/// A named parameter tensor (e.g. `enc0.weight`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub name: String,
    pub value: Tensor<T>,
}
