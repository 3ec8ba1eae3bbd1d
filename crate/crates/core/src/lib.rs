//! Continual reinforcement learning with verifiable rewards on synthetic
//! reasoning tasks, at a scale where everything is exact, seeded and fast.
//!
//! A tiny autoregressive policy is trained with group-relative policy
//! optimization over a sequence of tasks. The KL anchor to the previous
//! task's checkpoint can be static or modulated per sample by the previous
//! policy's confidence in its own reasoning (the `rdbcl` method), alongside
//! EWC, LwF and SFT baselines and the usual continual-learning metrics.

pub mod config;
pub mod continual;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod portability;
pub mod rlvr;
pub mod tasks;

pub use error::{CoreError, Result};
