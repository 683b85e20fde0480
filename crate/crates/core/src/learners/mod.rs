//! Tabular learners: the softmax/value-head parametrisation, KLQ and PPO
//! losses with analytic gradients, and the batch training loop.

pub mod config;
pub mod klq;
pub mod params;
pub mod ppo;
pub mod train;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use config::{KlDirection, TrainConfig};
pub use klq::{klq_loss, klq_loss_and_grad, klq_minibatch_update};
pub use params::{Gradient, ParamState, ValueInit};
pub use ppo::{
    ppo_clip_loss_and_grad, ppo_clip_minibatch_update, ppo_penalty_loss_and_grad, ppo_penalty_objective_eval, PpoLoss,
};
pub use train::{rollout_metrics, train, MetricsRow, MetricsSink, RolloutSummary, RunReport};

/// Training algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Klq,
    PpoClip,
    PpoPenalty,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Klq => "klq",
            Algo::PpoClip => "ppo-clip",
            Algo::PpoPenalty => "ppo-penalty",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "klq" => Ok(Algo::Klq),
            "ppo-clip" => Ok(Algo::PpoClip),
            "ppo-penalty" => Ok(Algo::PpoPenalty),
            other => Err(Error::InvalidArgument(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// One time step of a rollout with everything the update phase needs,
/// computed once under the frozen snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub state: usize,
    pub action: usize,
    /// KLQ regression target `Ĝ_t`.
    pub target: f64,
    /// PPO advantage.
    pub advantage: f64,
    /// PPO value-head regression target.
    pub value_target: f64,
    /// `log π_old(a_t|s_t)`.
    pub old_log_prob: f64,
    /// `V_old(s_t)`.
    pub old_value: f64,
    /// `log π_b(a_t|s_t)`.
    pub ref_log_prob: f64,
}
