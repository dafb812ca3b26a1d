pub mod cli;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fixed_point;
pub mod model;
pub mod teacher;
pub mod tensor;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
