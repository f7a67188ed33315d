//! Dense n-dimensional tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major buffer (last axis fastest).
//! A [`Graph`] is an arena of tensors connected by operations; calling
//! [`Graph::backward`] on a scalar node fills in gradients for every node
//! that requires them. Graphs are built per forward pass and dropped
//! afterwards, so there is no retained state between training steps other
//! than the parameter values themselves.
//!
//! All operations are single-threaded and free of platform-dependent
//! reductions, so results are bitwise reproducible for a fixed seed.

mod checkpoint;
mod conv;
mod graph;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::ConvGeometry;
pub use graph::{Graph, TensorId};

use std::fmt;

use num_traits::{Float, NumAssign};

/// Scalar element type usable in tensors and graphs.
///
/// Implemented for `f32` (training) and `f64` (gradient checking, where
/// finite differences need the extra precision).
pub trait Element:
    Float + NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Errors raised by tensor construction, graph operations, and checkpoints.
#[derive(Debug)]
pub enum TensorError {
    /// Operand shapes are inconsistent with the operation.
    Shape(String),
    /// The call itself is malformed (bad id, non-scalar backward root, ...).
    Usage(String),
    /// A numeric argument is out of its valid range.
    Parameter(String),
    /// Checkpoint I/O failed.
    Io(std::io::Error),
    /// Checkpoint bytes do not form a valid parameter file.
    Format(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape(m) => write!(f, "shape error: {m}"),
            TensorError::Usage(m) => write!(f, "usage error: {m}"),
            TensorError::Parameter(m) => write!(f, "parameter error: {m}"),
            TensorError::Io(e) => write!(f, "checkpoint i/o error: {e}"),
            TensorError::Format(m) => write!(f, "checkpoint format error: {m}"),
        }
    }
}

impl std::error::Error for TensorError {}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e)
    }
}

/// Dense tensor: a shape and a row-major value buffer.
///
/// Extents must be positive; a rank-0 tensor (empty shape) is a scalar and
/// holds exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor from a shape and matching buffer.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Shape(format!(
                "buffer holds {} elements but shape {shape:?} needs {numel}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Tensor filled by an index function over the flat buffer.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() needs a one-element tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major strides (last axis has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.shape[i + 1];
        }
        s
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to a different element type.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
