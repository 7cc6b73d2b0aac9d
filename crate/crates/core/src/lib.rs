pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
