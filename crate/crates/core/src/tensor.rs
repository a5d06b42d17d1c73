//! Dense row-major tensors.
//!
//! A [`Tensor`] is plain storage: a shape, a flat value buffer, and an
//! optional same-shape gradient accumulator. All graph bookkeeping lives
//! on the [`crate::tape::Tape`].

use crate::real::Real;
use std::fmt;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors raised by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named op.
    ShapeMismatch { op: &'static str, detail: String },
    /// Buffer length disagrees with the product of the shape.
    DataLength { expected: usize, got: usize },
    /// An op produced a NaN or infinite value.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called twice on the same tape without reset.
    BackwardConsumed,
    /// A scalar argument (stride, eps, ...) is out of range.
    InvalidArg { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::BackwardConsumed => {
                write!(f, "backward already ran on this tape; build a fresh tape")
            }
            TensorError::InvalidArg { op, detail } => write!(f, "invalid argument to {op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<F>) -> TensorResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix, used for identity-initialized projections.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::ONE;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Cols of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero-fills (allocating if needed) the gradient accumulator.
    pub fn reset_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = F::ZERO),
            None => self.grad = Some(vec![F::ZERO; self.data.len()]),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> TensorResult<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }
}
