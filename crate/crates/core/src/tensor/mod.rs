//! Dense row-major `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! The primitive set is deliberately small: exactly what the wavelet neural
//! operator and the embedded kernel need. Other modules extend it by
//! implementing [`Primitive`] (the wavelet transforms, the retained-band
//! channel mixing and the Gram assembly are registered this way).

mod ops;
mod tape;

pub use tape::{Gradients, Primitive, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: String,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },
    #[error("backward seed must be scalar-valued, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),
    #[error("variable #{0} does not belong to this tape")]
    UnknownVar(usize),
}

impl TensorError {
    pub(crate) fn mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &str, shape: &[usize], reason: impl Into<String>) -> Self {
        TensorError::InvalidShape {
            op: op.to_string(),
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}

/// A dense row-major array of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive, that the
    /// data length matches the shape and that every element is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::invalid("new", &shape, "extents must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::invalid(
                "new",
                &shape,
                format!("expected {n} elements, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new".into() });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for results whose shape is known to be valid;
    /// finiteness is checked by the tape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A rank-1 tensor holding `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::mismatch("reshape", &self.shape, &shape));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
