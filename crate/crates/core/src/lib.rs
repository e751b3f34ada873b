//! Federated optimistic Q-learning for tabular episodic MDPs.
//!
//! Agents explore with a shared greedy policy and stop a round as soon as
//! one of them reaches a per-cell visit cap; the server then folds their
//! local means into a global optimistic `Q` table.

pub mod accumulator;
pub mod agent;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod protocol;
pub mod schedule;
pub mod server;

pub use error::{Error, Result};
