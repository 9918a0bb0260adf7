//! Segmented-rollout reinforcement learning at desk scale.
//!
//! A linear-softmax policy is trained with group-relative advantages and a
//! clipped token-level objective on synthetic verifiable tasks. Rollouts are
//! decoded in bounded segments; unfinished trajectories carry over to the
//! next step. Also included: a rule-based answer checker, a JSONL cleaning
//! pipeline and a cost model of synchronous batched decoding.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod par;
pub mod policy;
pub mod ratios;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod sim;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Exec;
