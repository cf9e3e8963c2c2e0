//! Dense f64 tensors with a tape-based reverse-mode autodiff graph.
//!
//! The crate is deliberately small: enough primitives for convolutional
//! codecs and pre-norm transformers (conv2d / transposed conv, group and
//! layer norm, softmax, cross-entropy, gather, straight-through), plus an
//! Adam optimizer and a central-difference gradient checker. Everything is
//! sequential f64 with fixed accumulation order, so a given seed replays to
//! bit-identical forward and backward results.
//!
//! Networks are built per-call: insert leaves into a fresh [`Graph`], apply
//! ops, call [`Graph::backward`] on a scalar loss, then read gradients back
//! out. Parameters live outside the graph as plain [`Tensor`]s.

mod adam;
mod check;
mod graph;
mod kernels;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use check::grad_check;
pub use graph::{Graph, Var};
pub use kernels::all_finite;

use std::fmt;

/// A dense row-major f64 value. No gradient state; gradients live in the
/// [`Graph`] that consumed the tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        kernels::all_finite(&self.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// shape product and data length disagree
    ShapeDataMismatch { shape: Vec<usize>, data_len: usize },
    /// operands have incompatible shapes
    ShapeMismatch { op: &'static str, detail: String },
    /// a NaN or Inf appeared where finite values are required
    NonFinite { context: String },
    /// backward called on a tensor with more than one element
    NonScalarLoss { numel: usize },
    /// backward called twice on the same graph
    BackwardAlreadyRun,
    /// loss does not depend on any tensor that requires gradients
    DetachedLoss,
    /// argument outside its documented domain
    InvalidArgument { op: &'static str, detail: String },
    /// gather index out of range
    IndexOutOfRange { index: usize, len: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeDataMismatch { shape, data_len } => write!(
                f,
                "shape {:?} implies {} elements but data has {}",
                shape,
                shape.iter().product::<usize>(),
                data_len
            ),
            TensorError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            TensorError::NonFinite { context } => {
                write!(f, "non-finite value in {context}")
            }
            TensorError::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
            TensorError::BackwardAlreadyRun => {
                write!(f, "backward already ran on this graph; build a new graph")
            }
            TensorError::DetachedLoss => write!(
                f,
                "loss is detached from every tensor that requires gradients"
            ),
            TensorError::InvalidArgument { op, detail } => {
                write!(f, "invalid argument to {op}: {detail}")
            }
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
        }
    }
}

impl std::error::Error for TensorError {}
