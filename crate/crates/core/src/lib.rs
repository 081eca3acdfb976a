//! Multi-view disentanglement (MVD) for pixel-based reinforcement learning.

pub mod attribution;
pub mod env;
pub mod error;
pub mod harness;
pub mod mvdloss;
pub mod nets;
pub mod numcore;
pub mod rl;

pub use error::{Error, Result};
