//! Dyna-style model-based reinforcement learning with an out-of-distribution
//! filter over simulated rollouts, plus an empirical bound verification
//! harness.

pub mod agent;
pub mod bounds;
pub mod cli;
pub mod data;
pub mod dyna;
pub mod env;
pub mod error;
pub mod filter;
pub mod index;
pub mod model;
pub mod nn;
pub mod seed;

pub use data::{DiscreteAction, ReplayBuffer, StateVec, Transition};
pub use error::{Error, Result};
pub use seed::{Rng, RngSeed, Stream};
