//! Multi-task learning as task agents reading and writing permission-typed
//! parameters, with gradient passing between tasks.
//!
//! [`tensorcore`] is generic over the scalar type; everything above it runs
//! on `f64` through the aliases below.

pub mod commpass;
pub mod datakit;
pub mod harness;
pub mod readops;
pub mod registry;
pub mod tensorcore;
pub mod writeops;

pub use tensorcore::{GradientMap, Scalar, TensorError};

pub type Tensor = tensorcore::Tensor<f64>;
pub type Graph = tensorcore::Graph<f64>;
pub type Var<'g> = tensorcore::Var<'g, f64>;
