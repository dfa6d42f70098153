pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fair;
pub mod kernels;
pub mod ncm;
pub mod nn;
pub mod rng;
pub mod scm;
pub mod tensor;
pub mod tradeoff;

pub use error::{Error, Result};
