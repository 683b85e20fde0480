//! PPO-clip and PPO-penalty losses.

use crate::error::{Error, Result};
use crate::learners::config::KlDirection;
use crate::learners::params::{apply_gradient, Gradient, ParamState};
use crate::learners::StepRecord;
use crate::soft::kl_at_state;
use crate::tables::{PolicyTable, QTable};

/// Mean policy loss, mean value loss and their combination
/// `policy + ζ · value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLoss {
    pub policy: f64,
    pub value: f64,
    pub total: f64,
}

/// Clipped value loss `max((v − G)², (clip(v, v_old ± η) − G)²)` and its
/// derivative in `v`.
fn clipped_value_loss(v: f64, old: f64, target: f64, eta: f64) -> (f64, f64) {
    let vc = v.clamp(old - eta, old + eta);
    let plain = (v - target).powi(2);
    let clipped = (vc - target).powi(2);
    if plain >= clipped {
        (plain, 2.0 * (v - target))
    } else {
        (clipped, 0.0)
    }
}

/// PPO-clip loss: per step `max(−ρÂ, −clip(ρ, 1−ε, 1+ε)Â)` plus the
/// clipped value loss weighted by `ζ`.
pub fn ppo_clip_loss_and_grad(
    params: &ParamState,
    steps: &[StepRecord],
    clip_eps: f64,
    value_clip: f64,
    value_coef: f64,
) -> Result<(PpoLoss, Gradient)> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let pi = params.policy()?;
    let n = steps.len() as f64;
    let mut grad = Gradient::zeros_like(params);
    let (mut pl, mut vl) = (0.0, 0.0);
    for st in steps {
        let ratio = (pi.log_prob(st.state, st.action) - st.old_log_prob).exp();
        let adv = st.advantage;
        let unclipped = -ratio * adv;
        let clipped = -ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        if unclipped >= clipped {
            pl += unclipped;
            grad.add_log_prob_grad(&pi, st.state, st.action, -ratio * adv / n);
        } else {
            pl += clipped;
        }
        let (l, d) = clipped_value_loss(params.values[st.state], st.old_value, st.value_target, value_clip);
        vl += l;
        grad.values[st.state] += value_coef * d / n;
    }
    let loss = PpoLoss {
        policy: pl / n,
        value: vl / n,
        total: pl / n + value_coef * vl / n,
    };
    if !loss.total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!("PPO-clip loss {}", loss.total)));
    }
    Ok((loss, grad))
}

/// KL between rows `s` of `p` and `q` with its gradient in the logits of
/// whichever side is the trainable policy `pi`.
fn kl_term(pi: &PolicyTable, other: &PolicyTable, s: usize, direction: KlDirection) -> Result<(f64, Vec<f64>)> {
    let na = pi.num_actions();
    match direction {
        KlDirection::Reverse => {
            let d = kl_at_state(pi, other, s)?;
            let g = (0..na)
                .map(|a| {
                    let p = pi.prob(s, a);
                    if p == 0.0 {
                        0.0
                    } else {
                        p * (pi.log_prob(s, a) - other.log_prob(s, a) - d)
                    }
                })
                .collect();
            Ok((d, g))
        }
        KlDirection::Forward => {
            let d = kl_at_state(other, pi, s)?;
            let g = (0..na).map(|a| pi.prob(s, a) - other.prob(s, a)).collect();
            Ok((d, g))
        }
    }
}

/// PPO-penalty loss: per step `−ρÂ + β D_dir(s) + τ D(π_θ‖π_b)(s)` plus the
/// clipped value loss weighted by `ζ`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_penalty_loss_and_grad(
    params: &ParamState,
    steps: &[StepRecord],
    pi_old: &PolicyTable,
    pi_b: &PolicyTable,
    beta: f64,
    direction: KlDirection,
    tau: f64,
    value_clip: f64,
    value_coef: f64,
) -> Result<(PpoLoss, Gradient)> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let pi = params.policy()?;
    let na = pi.num_actions();
    let n = steps.len() as f64;
    let mut grad = Gradient::zeros_like(params);
    let (mut pl, mut vl) = (0.0, 0.0);
    for st in steps {
        let s = st.state;
        let ratio = (pi.log_prob(s, st.action) - st.old_log_prob).exp();
        pl -= ratio * st.advantage;
        grad.add_log_prob_grad(&pi, s, st.action, -ratio * st.advantage / n);
        if beta > 0.0 {
            let (d, g) = kl_term(&pi, pi_old, s, direction)?;
            pl += beta * d;
            for (a, ga) in g.into_iter().enumerate() {
                grad.logits[s * na + a] += beta * ga / n;
            }
        }
        let (d, g) = kl_term(&pi, pi_b, s, KlDirection::Reverse)?;
        pl += tau * d;
        for (a, ga) in g.into_iter().enumerate() {
            grad.logits[s * na + a] += tau * ga / n;
        }
        let (l, dv) = clipped_value_loss(params.values[s], st.old_value, st.value_target, value_clip);
        vl += l;
        grad.values[s] += value_coef * dv / n;
    }
    let loss = PpoLoss {
        policy: pl / n,
        value: vl / n,
        total: pl / n + value_coef * vl / n,
    };
    if !loss.total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!("PPO-penalty loss {}", loss.total)));
    }
    Ok((loss, grad))
}

/// One PPO-clip step; returns the new parameters and the pre-step (or
/// post-step) loss.
pub fn ppo_clip_minibatch_update(
    params: &ParamState,
    steps: &[StepRecord],
    clip_eps: f64,
    value_clip: f64,
    value_coef: f64,
    lr: f64,
    policy_lr_scale: f64,
    post_step_loss: bool,
) -> Result<(ParamState, PpoLoss)> {
    let (loss, grad) = ppo_clip_loss_and_grad(params, steps, clip_eps, value_clip, value_coef)?;
    let mut next = params.clone();
    apply_gradient(&mut next, &grad, lr, policy_lr_scale)?;
    let reported = if post_step_loss {
        ppo_clip_loss_and_grad(&next, steps, clip_eps, value_clip, value_coef)?.0
    } else {
        loss
    };
    Ok((next, reported))
}

/// Population PPO-penalty objective of a candidate policy:
/// `Σ_s w(s) [Σ_a π(a|s) Â(s,a) − β D_dir(s) − τ D(π‖π_b)(s)]`.
///
/// The importance-weighted form `Σ_a π_old (π/π_old) Â` reduces to
/// `Σ_a π Â`, so `π_old` enters only through the previous-iterate KL.
#[allow(clippy::too_many_arguments)]
pub fn ppo_penalty_objective_eval(
    candidate: &PolicyTable,
    pi_old: &PolicyTable,
    advantages: &QTable,
    beta: f64,
    tau: f64,
    pi_b: &PolicyTable,
    state_weights: &[f64],
    direction: KlDirection,
) -> Result<f64> {
    if state_weights.len() != candidate.num_states() {
        return Err(Error::InvalidArgument("state weights do not match the policy".into()));
    }
    let mut total = 0.0;
    for (s, &w) in state_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let gain: f64 = candidate.row(s).iter().zip(advantages.row(s)).map(|(p, a)| p * a).sum();
        let prev = if beta > 0.0 {
            kl_term(candidate, pi_old, s, direction)?.0
        } else {
            0.0
        };
        total += w * (gain - beta * prev - tau * kl_at_state(candidate, pi_b, s)?);
    }
    Ok(total)
}
