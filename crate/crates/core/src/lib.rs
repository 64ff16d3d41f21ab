pub mod arch;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod runtime;
pub mod scaling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, Tensor, Var};
