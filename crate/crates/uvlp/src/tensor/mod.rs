//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: tensors are flat row-major buffers of
//! rank 1 or 2, and gradients come from a [`Tape`] that records every
//! operation of a forward pass as a node. [`Tape::backward`] walks the nodes
//! in reverse topological order (which is simply reverse insertion order) and
//! accumulates gradients. One tape is built per training step and dropped
//! after the gradients have been pulled out.
//!
//! Everything downstream trusts this module because every operation's
//! backward rule is checked against central finite differences (see
//! [`check::finite_diff_check`]); the checker itself is validated with a
//! negative control in the tests.

mod check;
mod optim;
mod store;
mod tape;

pub use check::{finite_diff_check, finite_diff_check_steps, max_rel_error, rel_error};
pub use optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use store::{Binding, ParamId, ParamStore};
pub use tape::{gelu, gelu_grad, sigmoid, NodeId, Tape};

use std::fmt;

/// Errors raised by tensor construction, tape operations, and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor was constructed with a shape that does not match its data
    /// length, or with zero elements.
    InvalidShape { shape: Vec<usize>, data_len: usize },
    /// `backward` was called on a non-scalar node.
    NotScalar { shape: Vec<usize> },
    /// A masked softmax row had no allowed column.
    EmptyMaskRow { row: usize },
    /// The allow-mask does not cover the score matrix.
    MaskShape {
        rows: usize,
        cols: usize,
        mask_len: usize,
    },
    /// Layer norm over fewer than two feature rows is degenerate.
    DegenerateLayerNorm { rows: usize },
    /// An index-based operation referred to a row or column out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A gradient contained a NaN or infinity; named so the caller can report
    /// which parameter diverged.
    NonFiniteGradient { param: String },
    /// A tensor has no recorded tape node for the requested operation.
    NotOnTape,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::InvalidShape { shape, data_len } => {
                write!(
                    f,
                    "invalid tensor: shape {shape:?} does not describe {data_len} elements"
                )
            }
            TensorError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::EmptyMaskRow { row } => {
                write!(f, "masked softmax row {row} has no allowed column")
            }
            TensorError::MaskShape {
                rows,
                cols,
                mask_len,
            } => write!(
                f,
                "mask of length {mask_len} does not cover a {rows}x{cols} score matrix"
            ),
            TensorError::DegenerateLayerNorm { rows } => {
                write!(f, "layer norm needs at least 2 feature rows, got {rows}")
            }
            TensorError::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            TensorError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient in parameter '{param}'")
            }
            TensorError::NotOnTape => write!(f, "tensor has no node on the active tape"),
        }
    }
}

impl std::error::Error for TensorError {}

/// A dense tensor of rank 1 or 2, stored flat in row-major order.
///
/// Tensors destined for gradient updates carry `requires_grad = true` and an
/// optional `grad` buffer that optimizer steps consume. `node_id` records
/// where the tensor was last registered on a tape (see [`Tape::watch`]) so
/// gradients can be pulled back out after `backward`.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node_id: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor, validating that `shape` describes exactly
    /// `data.len()` elements and that the tensor is non-empty.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node_id: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "zero-size tensors are invalid");
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
            node_id: None,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, if any backward pass has populated it.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Mutable access to the gradient buffer, allocating it zeroed on first
    /// use. Intended for optimizer internals and tests.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Clears any accumulated gradient.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Tape node this tensor was last registered under, if any.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    pub(crate) fn set_node_id(&mut self, id: NodeId) {
        self.node_id = Some(id);
    }

    /// Adds the gradient recorded on `tape` for this tensor's node into the
    /// tensor's own `grad` buffer. Requires the tensor to have been
    /// registered with [`Tape::watch`] on this tape.
    pub fn accumulate_grad_from(&mut self, tape: &Tape) -> Result<(), TensorError> {
        let id = self.node_id.ok_or(TensorError::NotOnTape)?;
        if let Some(g) = tape.grad(id) {
            let buf = self.grad_mut();
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }
        Ok(())
    }

    /// Interprets the shape as (rows, cols); rank-1 tensors are column
    /// vectors.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }
}

/// (rows, cols) view of a rank-1 or rank-2 shape; rank-1 is a column vector.
pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        _ => panic!("rank > 2 is unsupported by tape operations: {shape:?}"),
    }
}
