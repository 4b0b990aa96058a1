//! Gated-attention transfer networks for reinforcement learning at desk
//! scale: a VAE state representation shared across tasks, a gate that
//! mixes frozen source Q-functions with a base network, an M-of-N source
//! scheduler, toy environments with mismatched state spaces, and a seeded
//! experiment harness.

pub mod adapter;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod harness;
pub mod repr;
pub mod rng;
pub mod sched;
pub mod trainer;

pub use error::{GatnError, Result};
