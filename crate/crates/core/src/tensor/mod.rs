//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod ops;
mod params;
mod scalar;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, TensorCheck};
pub use ops::{Primitive, PrimitiveKind};
pub(crate) use ops::{splitmix64, stable_hash};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{DropoutContext, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} holds {expected} values, got {actual}")]
    BadLength { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("shape {0:?} has a zero or missing extent")]
    EmptyShape(Vec<usize>),
    #[error("unknown primitive `{0}`")]
    UnknownOp(String),
    #[error("log of non-positive value {value} at index {index}")]
    LogNonPositive { index: usize, value: f64 },
    #[error("{op}: index {index} out of range for {bound} rows")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("parameter `{0}` already registered")]
    DuplicateParam(String),
    #[error("objective is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense array. Every extent is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(TensorError::BadLength { shape, expected, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = checked_numel(&shape).expect("tensor shape must have positive extents");
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have rank >= 1")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = checked_numel(&shape)?;
        if n != self.data.len() {
            return Err(TensorError::BadLength { shape, expected: n, actual: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::EmptyShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}
