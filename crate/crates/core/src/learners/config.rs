//! Training hyperparameters.

use crate::error::{Error, Result};
use crate::learners::params::ValueInit;
use crate::mdp::DEFAULT_HORIZON_CAP;

/// Direction of the KL penalty to the previous iterate in PPO-penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `D(π_θ‖π_old)`.
    #[default]
    Reverse,
    /// `D(π_old‖π_θ)`.
    Forward,
}

/// Hyperparameters shared by KLQ and the PPO baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// Initial learning rate; decays linearly to zero over the run.
    pub learning_rate: f64,
    /// Multiplier on the learning rate of the policy logits.
    pub policy_lr_scale: f64,
    pub epochs_per_batch: usize,
    pub rollouts_per_batch: usize,
    /// Trajectories per minibatch.
    pub minibatch_size: usize,
    pub total_episodes: usize,
    pub clip_eps: f64,
    pub value_clip: f64,
    pub value_coef: f64,
    pub length_penalty: f64,
    /// PPO-penalty strength `β` on the previous-iterate KL.
    pub penalty_beta: f64,
    pub penalty_direction: KlDirection,
    /// Standardise PPO advantages per batch. Never applied to KLQ.
    pub whiten_advantages: bool,
    pub value_init: ValueInit,
    /// Report the minibatch loss after the step instead of before it.
    pub post_step_loss: bool,
    pub horizon_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            gamma: 1.0,
            lambda: 0.95,
            alpha: 1.0,
            learning_rate: 1.41e-5,
            policy_lr_scale: 1.0,
            epochs_per_batch: 4,
            rollouts_per_batch: 192,
            minibatch_size: 192,
            total_episodes: 192 * 100,
            clip_eps: 0.2,
            value_clip: 0.2,
            value_coef: 0.1,
            length_penalty: 1.0,
            penalty_beta: 0.0,
            penalty_direction: KlDirection::Reverse,
            whiten_advantages: false,
            value_init: ValueInit::Zeros,
            post_step_loss: false,
            horizon_cap: DEFAULT_HORIZON_CAP,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive".into());
        }
        if !(self.policy_lr_scale > 0.0) || !self.policy_lr_scale.is_finite() {
            return bad("policy_lr_scale must be positive".into());
        }
        if self.epochs_per_batch == 0 || self.rollouts_per_batch == 0 || self.minibatch_size == 0 {
            return bad("epochs, rollouts per batch and minibatch size must be positive".into());
        }
        if self.total_episodes < self.rollouts_per_batch {
            return bad("total_episodes must cover at least one batch".into());
        }
        for (name, v) in [
            ("clip_eps", self.clip_eps),
            ("value_clip", self.value_clip),
            ("value_coef", self.value_coef),
            ("length_penalty", self.length_penalty),
            ("penalty_beta", self.penalty_beta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.horizon_cap == 0 {
            return bad("horizon_cap must be positive".into());
        }
        Ok(())
    }

    /// Whole batches in the run.
    pub fn num_batches(&self) -> usize {
        self.total_episodes / self.rollouts_per_batch
    }

    /// Linearly decayed rate for batch `b`.
    pub fn learning_rate_at(&self, b: usize) -> f64 {
        let n = self.num_batches().max(1) as f64;
        self.learning_rate * (1.0 - b as f64 / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.learning_rate_at(0), c.learning_rate);
        assert!(c.learning_rate_at(c.num_batches() - 1) > 0.0);
    }

    #[test]
    fn rejects_bad_alpha() {
        let c = TrainConfig {
            alpha: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
