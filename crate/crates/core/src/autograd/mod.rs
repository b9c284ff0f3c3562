//! Dense f64 tensors and tape-based reverse-mode differentiation.
//!
//! Every differentiable computation is written against a [`Tape`]: leaves go
//! in via [`Tape::leaf`], ops append nodes and return [`TensorId`]s, and
//! [`Tape::backward`] consumes the tape to produce gradients for every leaf
//! that had `requires_grad` set. There is no broadcasting beyond
//! scalar-with-tensor for add/sub/mul; shape mismatches are errors, not
//! silent promotions.

mod optim;
mod tape;
mod tensor;

pub mod check;

pub use optim::{AdamParams, Optimizer};
pub use tape::{Gradients, Op, Tape, TensorId};
pub use tensor::Tensor;

/// Errors raised by tensor construction, tape ops, and optimizers.
#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?} ({why})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensor construction received a non-finite value")]
    NonFiniteInput,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        op: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("{op}: label count {labels} does not match batch size {batch}")]
    LabelCount {
        op: &'static str,
        labels: usize,
        batch: usize,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("backward target does not depend on any requires_grad leaf")]
    DetachedOutput,
    #[error("optimizer step {step}: parameter {index} changed shape")]
    ParamShapeChanged { step: u64, index: usize },
    #[error("optimizer step: parameter {index} has no gradient")]
    MissingGradient { index: usize },
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

pub type AgResult<T> = Result<T, AutogradError>;
