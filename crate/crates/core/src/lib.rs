//! Expert merging with learned layer-wise and chunk-wise coefficients.
//!
//! The crate is `no_std` (with `alloc`) and contains everything numeric:
//! a differentiation tape over dense tensors, a tiny decoder transformer,
//! task-vector algebra, training-free merging baselines, coefficient
//! learning by hidden-state and logit alignment, importance-guided
//! chunking, and the synthetic task suite used to produce experts.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod align;
pub mod autodiff;
pub mod baselines;
pub mod chunked;
pub mod model;
pub mod optim;
pub mod task_vector;
pub mod tasks;
pub mod tensor;

pub use align::{AlignConfig, LayerCoefficients, TrainLog};
pub use autodiff::{DifferentiableScalar, Tape, Var};
pub use chunked::{ChunkCoefficients, ChunkPlan, ImportanceReport};
pub use model::{BlockUnit, ForwardTrace, ModelConfig, ModelParams, UnitId};
pub use task_vector::{TaskVector, UnitStats};
pub use tensor::{Tensor, TensorError};
