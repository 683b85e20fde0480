//! The batch training loop: rollout, frozen-snapshot targets, then epochs of
//! shuffled minibatch updates.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::estimators::{adjusted_returns, adjusted_rewards, gae_advantages, lambda_targets, LambdaParams};
use crate::learners::klq::klq_minibatch_update;
use crate::learners::params::{apply_gradient, ParamState};
use crate::learners::ppo::{ppo_clip_minibatch_update, ppo_penalty_loss_and_grad};
use crate::learners::{Algo, StepRecord, TrainConfig};
use crate::mdp::{rollout_batch, FiniteMdp, Trajectory};
use crate::rng::{derive_seed, seeded};
use crate::soft::kl_by_state;
use crate::tables::{PolicyTable, VTable};

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub batch: usize,
    pub episodes: usize,
    /// Mean summed environment reward per episode.
    pub mean_score: f64,
    /// Mean summed per-state `D(π‖π_b)` along each episode.
    pub mean_kl: f64,
    /// `mean_score − τ · mean_kl`.
    pub rlhf_reward: f64,
    /// Mean minibatch loss over the batch's updates.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub final_params: ParamState,
    pub wall_clock_seconds: f64,
}

/// Score, KL and RLHF reward of a set of rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSummary {
    pub mean_score: f64,
    pub mean_kl: f64,
    pub rlhf_reward: f64,
}

fn summarize(trajectories: &[Trajectory], kl: &[f64], tau: f64) -> RolloutSummary {
    let n = trajectories.len().max(1) as f64;
    let score = trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n;
    let total_kl = trajectories
        .iter()
        .map(|t| t.states[..t.len()].iter().map(|&s| kl[s]).sum::<f64>())
        .sum::<f64>()
        / n;
    RolloutSummary {
        mean_score: score,
        mean_kl: total_kl,
        rlhf_reward: score - tau * total_kl,
    }
}

/// Rolls out `policy` for `n` episodes and reports the mean score, mean
/// trajectory KL to `π_b` and RLHF reward.
pub fn rollout_metrics(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    pi_b: &PolicyTable,
    tau: f64,
    seed: u64,
    n: usize,
    horizon_cap: usize,
) -> Result<RolloutSummary> {
    let batch = rollout_batch(mdp, policy, seed, n, horizon_cap)?;
    let kl = kl_by_state(policy, pi_b, mdp)?;
    Ok(summarize(&batch.trajectories, &kl, tau))
}

/// Builds the per-step records of one batch under the frozen snapshot.
fn build_steps(
    algo: Algo,
    trajectories: &[Trajectory],
    pi_old: &PolicyTable,
    v_old: &VTable,
    pi_b: &PolicyTable,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<StepRecord>>> {
    let alpha = if algo == Algo::Klq { cfg.alpha } else { 1.0 };
    let lp = LambdaParams::new(cfg.lambda, alpha, cfg.gamma)?;
    let mut out = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let lt = lambda_targets(traj, pi_old, v_old, pi_b, lp, cfg.tau)?;
        let (advantages, value_targets) = if algo == Algo::Klq {
            (vec![0.0; traj.len()], vec![0.0; traj.len()])
        } else {
            let adj = adjusted_rewards(traj, pi_old, pi_b, cfg.tau)?;
            let mut adv = gae_advantages(traj, v_old, &adj, cfg.gamma, cfg.lambda)?;
            if algo == Algo::PpoPenalty {
                // Ĝ_t − V_old(s_t): GAE without the current-step log-ratio.
                for (t, a) in adv.iter_mut().enumerate() {
                    *a = lt.targets[t] - v_old.get(traj.states[t]);
                }
            }
            (adv, adjusted_returns(traj, v_old, &adj, cfg.gamma)?)
        };
        let steps = (0..traj.len())
            .map(|t| {
                let (s, a) = (traj.states[t], traj.actions[t]);
                StepRecord {
                    state: s,
                    action: a,
                    target: lt.targets[t],
                    advantage: advantages[t],
                    value_target: value_targets[t],
                    old_log_prob: pi_old.log_prob(s, a),
                    old_value: v_old.get(s),
                    ref_log_prob: pi_b.log_prob(s, a),
                }
            })
            .collect();
        out.push(steps);
    }
    if algo != Algo::Klq && cfg.whiten_advantages {
        whiten(&mut out);
    }
    Ok(out)
}

fn whiten(steps: &mut [Vec<StepRecord>]) {
    let all: Vec<f64> = steps.iter().flatten().map(|s| s.advantage).collect();
    if all.len() < 2 {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for s in steps.iter_mut().flatten() {
        s.advantage = (s.advantage - mean) / sd;
    }
}

/// Receives each metrics row as soon as its batch finishes.
pub type MetricsSink<'a> = dyn FnMut(&MetricsRow) -> Result<()> + 'a;

/// Trains `algo` from `π_θ = π_b`, calling `sink` after every batch.
pub fn train(
    algo: Algo,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    cfg: &TrainConfig,
    mut sink: Option<&mut MetricsSink<'_>>,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.gamma != mdp.gamma() {
        return Err(Error::InvalidArgument(format!(
            "config gamma {} differs from MDP gamma {}",
            cfg.gamma,
            mdp.gamma()
        )));
    }
    mdp.check_policy(pi_b)?;
    let start = Instant::now();
    let mut params = ParamState::from_reference(pi_b, cfg.value_init)?;
    let mut rows = Vec::with_capacity(cfg.num_batches());
    for b in 0..cfg.num_batches() {
        let lr = cfg.learning_rate_at(b);
        let snapshot = params.clone();
        let pi_old = snapshot.policy()?;
        let v_old = snapshot.value_table()?;
        let batch = rollout_batch(
            mdp,
            &pi_old,
            derive_seed(cfg.seed, &[1, b as u64]),
            cfg.rollouts_per_batch,
            cfg.horizon_cap,
        )?;
        let kl = kl_by_state(&pi_old, pi_b, mdp)?;
        let summary = summarize(&batch.trajectories, &kl, cfg.tau);
        let steps = build_steps(algo, &batch.trajectories, &pi_old, &v_old, pi_b, cfg)?;

        let mut order: Vec<usize> = (0..steps.len()).collect();
        let mut loss_sum = 0.0;
        let mut updates = 0usize;
        let mut minibatch = Vec::new();
        for epoch in 0..cfg.epochs_per_batch {
            order.shuffle(&mut seeded(derive_seed(cfg.seed, &[2, b as u64, epoch as u64])));
            for chunk in order.chunks(cfg.minibatch_size) {
                minibatch.clear();
                minibatch.extend(chunk.iter().flat_map(|&i| steps[i].iter().copied()));
                if minibatch.is_empty() {
                    continue;
                }
                let loss = match algo {
                    Algo::Klq => {
                        let (next, loss) = klq_minibatch_update(
                            &params,
                            &minibatch,
                            cfg.tau,
                            lr,
                            cfg.policy_lr_scale,
                            cfg.post_step_loss,
                        )?;
                        params = next;
                        loss
                    }
                    Algo::PpoClip => {
                        let (next, loss) = ppo_clip_minibatch_update(
                            &params,
                            &minibatch,
                            cfg.clip_eps,
                            cfg.value_clip,
                            cfg.value_coef,
                            lr,
                            cfg.policy_lr_scale,
                            cfg.post_step_loss,
                        )?;
                        params = next;
                        loss.total
                    }
                    Algo::PpoPenalty => {
                        let (loss, grad) = ppo_penalty_loss_and_grad(
                            &params,
                            &minibatch,
                            &pi_old,
                            pi_b,
                            cfg.penalty_beta,
                            cfg.penalty_direction,
                            cfg.tau,
                            cfg.value_clip,
                            cfg.value_coef,
                        )?;
                        apply_gradient(&mut params, &grad, lr, cfg.policy_lr_scale)?;
                        if cfg.post_step_loss {
                            ppo_penalty_loss_and_grad(
                                &params,
                                &minibatch,
                                &pi_old,
                                pi_b,
                                cfg.penalty_beta,
                                cfg.penalty_direction,
                                cfg.tau,
                                cfg.value_clip,
                                cfg.value_coef,
                            )?
                            .0
                            .total
                        } else {
                            loss.total
                        }
                    }
                };
                loss_sum += loss;
                updates += 1;
            }
        }
        let row = MetricsRow {
            batch: b,
            episodes: (b + 1) * cfg.rollouts_per_batch,
            mean_score: summary.mean_score,
            mean_kl: summary.mean_kl,
            rlhf_reward: summary.rlhf_reward,
            loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
            lr,
        };
        if let Some(sink) = sink.as_mut() {
            sink(&row)?;
        }
        rows.push(row);
    }
    Ok(RunReport {
        rows,
        final_params: params,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}
