//! Differentiable kernels. Every forward op has a matching explicit backward.

mod basic;
mod conv;
mod loss;
mod norm;

pub use basic::*;
pub use conv::*;
pub use loss::*;
pub use norm::*;
