//! Multi-scale densely connected U-Nets with incremental power-of-two
//! weight quantization, on a small self-contained tensor engine.
//!
//! - [`tensor`]: rank-4 tensors and differentiable primitives.
//! - [`graph`]: architecture construction, shape inference, execution.
//! - [`quant`]: incremental network quantization.
//! - [`train`] and [`metrics`]: SGD training and segmentation scores.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod par;
pub mod quant;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ArchConfig, CrossMode, DenseDegree, ModelGraph, UpsampleMode};
pub use real::Real;
pub use tensor::{Parameter, Shape, Tensor};
