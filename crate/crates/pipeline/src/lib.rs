//! Desk-scale experiment pipeline: synthetic data, teacher pool, combiners,
//! distillation, int8 deployment, device routing and evaluation.

pub mod budget;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod phases;
pub mod router;

pub use error::{PipelineError, Result};
