//! Norm folding, int8 calibration, integer inference and fake quantization.

mod calibrate;
mod fold;
mod model;
mod params;

pub use calibrate::*;
pub use fold::*;
pub use model::*;
pub use params::*;
