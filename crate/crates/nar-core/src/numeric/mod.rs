//! Dense 2-D tensor engine with reverse-mode differentiation.
//!
//! Values are row-major matrices (vectors are n x 1, scalars 1 x 1). A
//! [`Tape`](tape::Tape) records operations define-by-run and is rebuilt
//! each forward pass; parameters live outside the tape as plain
//! [`Tensor`]s and are bound as borrowed leaves, so sharing them across
//! per-sample tapes costs nothing.

pub mod adam;
pub mod tape;

#[cfg(test)]
mod tests;

use std::fmt::Debug;

use crate::error::{NarError, Result};

/// Element type of the engine: f32 for training and checkpoints, f64 for
/// gradient checks.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A plain matrix value: shape, row-major data, and optional gradient
/// storage populated by training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NarError::ShapeMismatch {
                op: "tensor",
                detail: format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    /// Replaces `grad` with the given buffer (must match the shape).
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(NarError::ShapeMismatch {
                op: "set_grad",
                detail: format!(
                    "grad length {} vs data length {}",
                    grad.len(),
                    self.data.len()
                ),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }
}
