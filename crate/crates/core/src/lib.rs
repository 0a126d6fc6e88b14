//! Diagnostic pathway learning over synthetic electronic health records.
//!
//! The crate covers dataset synthesis and degradation ([`synthgen`]), the
//! episodic diagnosis MDP ([`env`]), a small dense network with manual
//! backpropagation ([`qnet`]), DQN-family training ([`drl`]), comparison
//! agents and classifiers ([`baselines`]), evaluation metrics ([`metrics`]),
//! pathway aggregation ([`pathways`]) and experiment orchestration
//! ([`harness`]).

// `!(x > 0.0)` checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod drl;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod pathways;
pub mod qnet;
pub mod synthgen;

pub use error::{Error, Result};
