pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod flops;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
