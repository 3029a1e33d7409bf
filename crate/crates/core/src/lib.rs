//! Continual reinforcement learning over tasks whose discrete action sets change.
//!
//! The crate bundles a small dense-network library, deterministic gridworlds
//! with per-task action masks, an agent that acts through a learned action
//! representation space, direct-logit baselines, continual-learning metrics and
//! a command-line harness that ties them together.

pub mod action_repr;
pub mod agent;
pub mod baselines;
pub mod envs;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
