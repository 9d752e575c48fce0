//! Competitive 2D tracking: a deterministic arena, a diagonal-Gaussian MLP
//! policy, behavior cloning from a scripted expert, single-agent and
//! competitive multi-agent GRPO, and a seeded benchmark harness.

pub mod arena;
pub mod bc;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grpo;
pub mod io;
pub mod marl;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod seeds;

pub use error::{Error, Result};
