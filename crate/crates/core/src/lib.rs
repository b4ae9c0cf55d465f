//! Crowd counting under single-source domain generalization: density
//! targets from point labels, a dual-stream memory-bank network, training,
//! evaluation and a synthetic domain-shift benchmark.

pub mod autograd;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod losses;
pub mod model;
pub mod synthbench;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
