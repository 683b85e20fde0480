//! Tabular laboratory for KL-regularised Q-learning (KLQ) and PPO baselines.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: finite MDPs, rollouts and state-visitation distributions.
//! - [`prefix_tree`]: token-level prefix-tree MDPs built from a completion scorer.
//! - [`tables`]: policy, action-value and state-value tables.
//! - [`soft`]: exact KL-regularised Bellman machinery (operators, Boltzmann map, solvers).
//! - [`estimators`]: per-trajectory TD errors, λ-return targets and GAE advantages.
//! - [`learners`]: tabular softmax parametrisation, KLQ and PPO losses, training loops.
//! - [`equivalence`]: Q-space versus (π, V)-space update sequences.
//! - [`envs`]: synthetic reward models, reference policies and task builders.
//! - [`io`]: plain-text formats for MDPs, tables, corpora and metrics.
//! - [`verify`]: executable property suites with measured margins.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod envs;
pub mod equivalence;
pub mod error;
pub mod estimators;
pub mod io;
pub mod learners;
pub mod mdp;
pub mod prefix_tree;
pub mod rng;
pub mod soft;
pub mod tables;
pub mod verify;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, Outcome, Trajectory, TrajectoryBatch};
pub use soft::SoftRlParams;
pub use tables::{PolicyTable, QTable, VTable};
