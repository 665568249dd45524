//! Teacher training with a clipped policy gradient, depth-student distillation
//! and batch evaluation on top of `parkour-core`.

pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod obs;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod report;
pub mod train;

pub use error::{LearnError, Result};
