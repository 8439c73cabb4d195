pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod service;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, FieldError, Result};
pub use tensor::{Tape, Tensor, Var};
