pub mod attack;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gp;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod quadrature;
pub mod robustmax;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
