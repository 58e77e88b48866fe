//! Dense N-D tensors with reverse-mode automatic differentiation.
//!
//! The engine is a flat tape: every operation appends a node to a [`Graph`],
//! so insertion order is already topological and the backward pass is a
//! single reverse sweep. Training runs in `f32`; gradient verification reruns
//! reduced configurations in `f64` through the same generic code.

mod array;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use array::TArray;
pub use gradcheck::grad_check;
pub use graph::{BatchStats, Graph, Var};
pub use params::{normal_init, ParamId, ParamStore};

use alloc::string::String;

/// Epsilon inside batch-norm and layer-norm variance denominators.
pub const NORM_EPS: f64 = 1e-5;

/// Standard deviation of the normal initializer for conv/linear weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
}

/// Element type of tensors: `f32` for training, `f64` for verification.
pub trait Scalar:
    num_traits::Float
    + core::fmt::Debug
    + core::fmt::Display
    + core::iter::Sum<Self>
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}
