//! Decentralized actor-critic (AC) and natural actor-critic (NAC) for
//! cooperative multi-agent reinforcement learning over a gossip network.
//!
//! Agents share only noisy copies of their local rewards, learn a linear
//! critic with mini-batch decentralized TD, and update per-agent tabular
//! softmax policies. The [`oracle`] module computes every analytic quantity
//! (visitation distributions, values, exact policy gradient, TD fixed point,
//! Fisher matrix, optimal value) by brute force for metrics and verification.

// Negated comparisons deliberately reject NaN parameters.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ac;
pub mod critic;
pub mod dacrp;
pub mod error;
pub mod gossip;
pub mod harness;
pub mod mdp;
pub mod nac;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
