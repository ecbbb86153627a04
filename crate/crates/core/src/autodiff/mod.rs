//! Minimal reverse-mode automatic differentiation on dense tensors.
//!
//! The design is a flat tape: every operation appends a node holding its
//! output value and the indices of its inputs, and [`Tape::backward`] walks
//! the nodes in reverse creation order (which is already a topological
//! order). There is no graph pruning, no views, no in-place mutation —
//! training graphs here are rebuilt every iteration and stay small enough
//! that simplicity wins.
//!
//! Conventions:
//! - tensors are row-major with shapes like `[C, H, W]` or `[rows, cols]`;
//! - broadcasting is limited to *trailing* dimensions: two shapes are
//!   compatible when one is a suffix of the other (`[3,H,W] op [H,W]`,
//!   `[N,64] op [64]`); anything fancier is a hard error;
//! - reductions use a fixed summation order so repeated runs of the same
//!   binary are bit-identical.

pub mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{Tape, Var};
pub(crate) use tape::{BackwardCtx, CustomOp};

use crate::real::Real;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward: root must be a scalar, got shape {got:?}")]
    NonScalarRoot { got: Vec<usize> },
}

/// Dense row-major tensor. Plain value type with no gradient bookkeeping;
/// the tape owns all differentiation state.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| Real::to_f64(*v)).collect()
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }
}

/// Result of checking two shapes under the trailing-dimension rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a suffix of the left: it repeats over the left's
    /// leading dimensions.
    RightOntoLeft,
    /// Left operand is a suffix of the right.
    LeftOntoRight,
}

/// Decide how `lhs` and `rhs` combine elementwise, or fail with both shapes
/// named. Only suffix broadcasting is supported.
pub(crate) fn broadcast_kind(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Broadcast, TensorError> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let suffix = |big: &[usize], small: &[usize]| {
        small.len() < big.len() && big[big.len() - small.len()..] == *small
    };
    if suffix(lhs, rhs) {
        Ok(Broadcast::RightOntoLeft)
    } else if suffix(rhs, lhs) {
        Ok(Broadcast::LeftOntoRight)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}
