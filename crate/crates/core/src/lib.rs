//! Test-time back-propagation of auxiliary evidence through shared-trunk
//! multi-task networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] — tape-based reverse-mode differentiation over dense `f64` tensors;
//! * [`model`] — the multi-task network (shared trunk, primary head, auxiliary heads) and weight snapshots;
//! * [`training`] — joint SGD training on the primary and auxiliary losses;
//! * [`adapt`] — per-instance re-adjustment of the trunk to fit observed evidence;
//! * [`baselines`] — label pruning and the seven-variant comparison;
//! * [`synthbench`] — synthetic benchmarks, noisy tags and metrics;
//! * [`cli`] — the config-driven experiment driver behind the `evprop` binary.

pub mod adapt;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod model;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
