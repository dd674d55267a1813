//! Engine for compact acoustic scene classifiers distilled from a teacher
//! ensemble: tensors and differentiable kernels, the depthwise-separable
//! student backbone, learned ensemble fusion, distillation losses,
//! energy-adaptive impulse-response augmentation with a mel front end, and
//! an int8 inference path with norm folding.

pub mod archive;
pub mod augment;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod mel;
pub mod net;
pub mod ops;
pub mod optim;
pub mod param;
pub mod quant;
pub mod tensor;
pub mod tnsr;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
