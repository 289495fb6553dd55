//! Column-major tensors, a static-graph CNN framework, momentum SGD and a
//! synchronous data-parallel parameter server with 8-bit gradient coding.

pub mod bench;
pub mod data;
pub mod distrib;
pub mod error;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Idx, Tensor};
