//! Student backbone: configuration, construction, complexity accounting, checkpoints.

mod checkpoint;
mod complexity;
mod config;
mod network;

pub use checkpoint::*;
pub use complexity::*;
pub use config::*;
pub use network::*;
