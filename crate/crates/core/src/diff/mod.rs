//! Reverse-mode autodiff over small dense tensors, parameters, Adam and
//! checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, Unary, Var};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
