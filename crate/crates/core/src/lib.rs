//! Input-Hessian regularized training and second-order robustness tooling.

pub mod attacks;
pub mod autodiff;
pub mod certificates;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod opnorm;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Lp, Tensor};
