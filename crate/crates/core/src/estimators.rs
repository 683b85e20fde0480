//! Per-trajectory TD errors, conservative λ-return targets and GAE
//! advantages.
//!
//! Every function reads a frozen `(π, V)` snapshot and never mutates it.
//! Action values are always the decomposition `Q(s,a) = τ log(π(a|s)/π_b(a|s)) + V(s)`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::soft::{kl_at_state, SoftRlParams};
use crate::tables::{PolicyTable, VTable};

/// Tolerance of the mandatory TD cross-check.
pub const TD_CROSS_CHECK_TOL: f64 = 1e-10;

/// Truncation rate, conservatism and discount of the λ-return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaParams {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl LambdaParams {
    pub fn new(lambda: f64, alpha: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {lambda}"
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(Self { lambda, alpha, gamma })
    }
}

/// How TD errors are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TdMode {
    /// `δ_t = r_{t+1} + γV(s_{t+1}) − Q(s_t, a_t)`.
    #[default]
    Decomposed,
    /// `δ_t = r_{t+1} + γ(Σ_a π(a|s_{t+1}) Q(s_{t+1}, a) − τ D(π‖π_b)(s_{t+1})) − Q(s_t, a_t)`.
    Expected,
    /// Computes both and fails if they differ by more than [`TD_CROSS_CHECK_TOL`].
    CrossChecked,
}

fn check_traj(traj: &Trajectory, pi: &PolicyTable, v: &VTable) -> Result<()> {
    if traj.states.len() != traj.actions.len() + 1 || traj.rewards.len() != traj.actions.len() {
        return Err(Error::InvalidArgument("trajectory lengths are inconsistent".into()));
    }
    if let Some(&s) = traj.states.iter().find(|&&s| s >= pi.num_states() || s >= v.len()) {
        return Err(Error::InvalidArgument(format!("trajectory state {s} out of range")));
    }
    if let Some(&a) = traj.actions.iter().find(|&&a| a >= pi.num_actions()) {
        return Err(Error::InvalidArgument(format!("trajectory action {a} out of range")));
    }
    Ok(())
}

fn log_ratio(pi: &PolicyTable, pi_b: &PolicyTable, s: usize, a: usize) -> Result<f64> {
    let lp = pi.log_prob(s, a);
    let lb = pi_b.log_prob(s, a);
    if lb == f64::NEG_INFINITY || lp == f64::NEG_INFINITY {
        return Err(Error::SupportViolation {
            state: s,
            action: a,
            detail: "taken action has zero probability",
        });
    }
    Ok(lp - lb)
}

/// `Q(s,a) = τ log(π(a|s)/π_b(a|s)) + V(s)` for one pair.
pub fn decomposed_q(pi: &PolicyTable, v: &VTable, pi_b: &PolicyTable, tau: f64, s: usize, a: usize) -> Result<f64> {
    Ok(tau * log_ratio(pi, pi_b, s, a)? + v.get(s))
}

/// `r̄_{t+1} = r_{t+1} − τ log(π(a_t|s_t)/π_b(a_t|s_t))`.
pub fn adjusted_rewards(traj: &Trajectory, pi: &PolicyTable, pi_b: &PolicyTable, tau: f64) -> Result<Vec<f64>> {
    if tau == 0.0 {
        return Ok(traj.rewards.clone());
    }
    traj.actions
        .iter()
        .zip(&traj.states)
        .zip(&traj.rewards)
        .map(|((&a, &s), &r)| Ok(r - tau * log_ratio(pi, pi_b, s, a)?))
        .collect()
}

/// Bootstrap value of `s_{t+1}`: zero when it is the terminal end of the episode.
fn bootstrap(traj: &Trajectory, v: &VTable, next: usize) -> f64 {
    if traj.is_terminal_at(next) {
        0.0
    } else {
        v.get(traj.states[next])
    }
}

fn expected_bootstrap(
    traj: &Trajectory,
    pi: &PolicyTable,
    v: &VTable,
    pi_b: &PolicyTable,
    tau: f64,
    next: usize,
) -> Result<f64> {
    if traj.is_terminal_at(next) {
        return Ok(0.0);
    }
    let s = traj.states[next];
    let mut expected = 0.0;
    for a in 0..pi.num_actions() {
        let p = pi.prob(s, a);
        if p > 0.0 {
            expected += p * decomposed_q(pi, v, pi_b, tau, s, a)?;
        }
    }
    Ok(expected - tau * kl_at_state(pi, pi_b, s)?)
}

/// TD errors `δ_0 … δ_{T−1}` of the snapshot `(π, V)`.
pub fn td_errors(
    traj: &Trajectory,
    pi: &PolicyTable,
    v: &VTable,
    pi_b: &PolicyTable,
    params: SoftRlParams,
    mode: TdMode,
) -> Result<Vec<f64>> {
    check_traj(traj, pi, v)?;
    let (tau, gamma) = (params.tau, params.gamma);
    let mut out = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let (s, a) = (traj.states[t], traj.actions[t]);
        let q = decomposed_q(pi, v, pi_b, tau, s, a)?;
        let r = traj.rewards[t];
        let delta = match mode {
            TdMode::Decomposed => r + gamma * bootstrap(traj, v, t + 1) - q,
            TdMode::Expected => r + gamma * expected_bootstrap(traj, pi, v, pi_b, tau, t + 1)? - q,
            TdMode::CrossChecked => {
                let short = r + gamma * bootstrap(traj, v, t + 1) - q;
                let long = r + gamma * expected_bootstrap(traj, pi, v, pi_b, tau, t + 1)? - q;
                let gap = (short - long).abs();
                if gap > TD_CROSS_CHECK_TOL * (1.0 + short.abs()) {
                    return Err(Error::CrossCheck {
                        what: "TD error forms",
                        gap,
                    });
                }
                short
            }
        };
        out.push(delta);
    }
    Ok(out)
}

/// TD errors, error terms and regression targets of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaTargets {
    pub td: Vec<f64>,
    /// `Δ_t = δ_t + λγΔ_{t+1}`, `Δ_T = 0`.
    pub error_terms: Vec<f64>,
    /// `Ĝ_t = αΔ_t + Q(s_t, a_t)`.
    pub targets: Vec<f64>,
    /// `Q(s_t, a_t)` under the snapshot.
    pub q_taken: Vec<f64>,
}

/// Conservative λ-return targets.
pub fn lambda_targets(
    traj: &Trajectory,
    pi: &PolicyTable,
    v: &VTable,
    pi_b: &PolicyTable,
    lp: LambdaParams,
    tau: f64,
) -> Result<LambdaTargets> {
    let params = SoftRlParams::new(tau, lp.gamma)?;
    let td = td_errors(traj, pi, v, pi_b, params, TdMode::Decomposed)?;
    let n = td.len();
    let mut error_terms = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        acc = td[t] + lp.lambda * lp.gamma * acc;
        error_terms[t] = acc;
    }
    let mut q_taken = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for t in 0..n {
        let q = decomposed_q(pi, v, pi_b, tau, traj.states[t], traj.actions[t])?;
        q_taken.push(q);
        targets.push(lp.alpha * error_terms[t] + q);
    }
    Ok(LambdaTargets {
        td,
        error_terms,
        targets,
        q_taken,
    })
}

/// GAE advantages on adjusted rewards:
/// `δ_t = r̄_{t+1} + γV(s_{t+1}) − V(s_t)`, `Â_t = δ_t + λγÂ_{t+1}`, `Â_T = 0`.
pub fn gae_advantages(traj: &Trajectory, v: &VTable, adjusted: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if adjusted.len() != traj.len() || traj.states.len() != traj.len() + 1 {
        return Err(Error::InvalidArgument(
            "adjusted rewards do not match the trajectory".into(),
        ));
    }
    if let Some(&s) = traj.states.iter().find(|&&s| s >= v.len()) {
        return Err(Error::InvalidArgument(format!("trajectory state {s} out of range")));
    }
    let n = traj.len();
    let mut out = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = adjusted[t] + gamma * bootstrap(traj, v, t + 1) - v.get(traj.states[t]);
        acc = delta + lambda * gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// One-step GAE deltas on adjusted rewards.
pub fn gae_deltas(traj: &Trajectory, v: &VTable, adjusted: &[f64], gamma: f64) -> Result<Vec<f64>> {
    gae_advantages(traj, v, adjusted, gamma, 0.0)
}

/// Discounted sum of adjusted rewards from each step, bootstrapped with `V`
/// at a non-terminal final state: `Σ_{k≥t} γ^{k−t} r̄_{k+1}`.
pub fn adjusted_returns(traj: &Trajectory, v: &VTable, adjusted: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if adjusted.len() != traj.len() {
        return Err(Error::InvalidArgument(
            "adjusted rewards do not match the trajectory".into(),
        ));
    }
    let n = traj.len();
    let mut out = vec![0.0; n];
    let mut acc = bootstrap(traj, v, n);
    for t in (0..n).rev() {
        acc = adjusted[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Targets of a whole batch, tagged with the snapshot that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBatch {
    pub snapshot_tag: u64,
    pub per_trajectory: Vec<LambdaTargets>,
    /// GAE advantages on adjusted rewards, when requested.
    pub advantages: Option<Vec<Vec<f64>>>,
}

impl TargetBatch {
    pub fn compute(
        trajectories: &[Trajectory],
        pi: &PolicyTable,
        v: &VTable,
        pi_b: &PolicyTable,
        lp: LambdaParams,
        tau: f64,
        with_gae: bool,
        snapshot_tag: u64,
    ) -> Result<Self> {
        let per_trajectory = trajectories
            .iter()
            .map(|t| lambda_targets(t, pi, v, pi_b, lp, tau))
            .collect::<Result<Vec<_>>>()?;
        let advantages = if with_gae {
            Some(
                trajectories
                    .iter()
                    .map(|t| {
                        let adj = adjusted_rewards(t, pi, pi_b, tau)?;
                        gae_advantages(t, v, &adj, lp.gamma, lp.lambda)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            snapshot_tag,
            per_trajectory,
            advantages,
        })
    }

    /// Writes `trajectory,t,delta,error_term,target,advantage`; the advantage
    /// column is empty when GAE was not requested.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record(["trajectory", "t", "delta", "error_term", "target", "advantage"])
            .map_err(io)?;
        for (i, lt) in self.per_trajectory.iter().enumerate() {
            for t in 0..lt.td.len() {
                let adv = self
                    .advantages
                    .as_ref()
                    .map(|a| a[i][t].to_string())
                    .unwrap_or_default();
                w.write_record([
                    i.to_string(),
                    t.to_string(),
                    lt.td[t].to_string(),
                    lt.error_terms[t].to_string(),
                    lt.targets[t].to_string(),
                    adv,
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
