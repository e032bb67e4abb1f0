//! Minimal reverse-mode differentiable tensor core.
//!
//! Provides exactly what a small multi-stream 3D convolutional classifier
//! needs: channels-last 3D convolutions (and their 2D/1D and transposed
//! specializations), pooling, linear layers, concatenation, softmax and a
//! soft-target cross entropy, together with Adam, a named parameter store,
//! a checkpoint container and a finite-difference gradient checker.

pub mod checkpoint;
pub mod conv;
mod error;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use conv::ConvGeometry;
pub use error::{Result, TensorError};
pub use gemm::Precision;
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use graph::{softmax_in_place, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
