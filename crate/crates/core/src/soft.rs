//! Exact KL-regularised RL mathematics on finite MDPs.
//!
//! Conventions shared by every function here:
//!
//! - Terminal states have `Q ≡ 0`, `V = 0` and contribute no KL penalty, so a
//!   transition into a terminal state contributes only its reward.
//! - The soft Bellman operator for a policy `π` is
//!   `(B^π Q)(s,a) = E[r + γ(Σ_a' π(a'|s') Q(s',a') − τ D(π‖π_b)(s'))]`,
//!   affine in `Q`: `B^π Q = c + M Q`, where `M` is the γ-scaled
//!   state-action transition operator under `π`.
//! - Log-sum-exp is always max-shifted.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Trajectory};
use crate::tables::{log_sum_exp, PolicyTable, QTable, VTable};

/// Maximum number of non-terminal `(state, action)` pairs in a dense solve.
pub const DENSE_PAIR_BUDGET: usize = 5000;

/// Convergence threshold for soft value iteration.
pub const VALUE_ITERATION_TOL: f64 = 1e-10;

/// Iteration cap for soft value iteration.
pub const VALUE_ITERATION_MAX: usize = 200_000;

/// KL temperature and discount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftRlParams {
    pub tau: f64,
    pub gamma: f64,
}

impl SoftRlParams {
    pub fn new(tau: f64, gamma: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        Ok(Self { tau, gamma })
    }

    /// Temperature `tau` with the MDP's own discount.
    pub fn for_mdp(mdp: &FiniteMdp, tau: f64) -> Result<Self> {
        Self::new(tau, mdp.gamma())
    }

    fn check_against(&self, mdp: &FiniteMdp) -> Result<()> {
        Self::new(self.tau, self.gamma)?;
        if self.gamma != mdp.gamma() {
            return Err(Error::InvalidArgument(format!(
                "params gamma {} differs from MDP gamma {}",
                self.gamma,
                mdp.gamma()
            )));
        }
        Ok(())
    }
}

/// `D(π‖π_b)(s) = Σ_a π(a|s) log(π(a|s)/π_b(a|s))`.
pub fn kl_at_state(pi: &PolicyTable, pi_b: &PolicyTable, s: usize) -> Result<f64> {
    let mut kl = 0.0;
    for a in 0..pi.num_actions() {
        let p = pi.prob(s, a);
        if p == 0.0 {
            continue;
        }
        let lb = pi_b.log_prob(s, a);
        if lb == f64::NEG_INFINITY {
            return Err(Error::SupportViolation {
                state: s,
                action: a,
                detail: "reference policy is zero where the policy is positive",
            });
        }
        kl += p * (pi.log_prob(s, a) - lb);
    }
    // Rounding can leave a tiny negative number when the rows coincide.
    Ok(kl.max(0.0))
}

/// Per-state `D(π‖π_b)`, zero at terminal states.
pub fn kl_by_state(pi: &PolicyTable, pi_b: &PolicyTable, mdp: &FiniteMdp) -> Result<Vec<f64>> {
    (0..mdp.num_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                Ok(0.0)
            } else {
                kl_at_state(pi, pi_b, s)
            }
        })
        .collect()
}

/// KL-augmented return from step `t`:
/// `Σ_{k=t}^{T−1} γ^{k−t} (r_{k+1} − τγ D(π‖π_b)(s_{k+1}))`.
///
/// The KL term is dropped when `s_{k+1}` is terminal.
pub fn kl_augmented_return(
    traj: &Trajectory,
    pi: &PolicyTable,
    pi_b: &PolicyTable,
    params: SoftRlParams,
    t: usize,
) -> Result<f64> {
    let horizon = traj.len();
    if t >= horizon {
        return Err(Error::InvalidArgument(format!(
            "step {t} is not before the episode end {horizon}"
        )));
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for k in t..horizon {
        let next = k + 1;
        let kl = if traj.is_terminal_at(next) {
            0.0
        } else {
            kl_at_state(pi, pi_b, traj.states[next])?
        };
        total += discount * (traj.rewards[k] - params.tau * params.gamma * kl);
        discount *= params.gamma;
    }
    Ok(total)
}

fn check_shapes(mdp: &FiniteMdp, tables: &[&PolicyTable], q: Option<&QTable>) -> Result<()> {
    for p in tables {
        mdp.check_policy(p)?;
    }
    if let Some(q) = q {
        if q.num_states() != mdp.num_states() || q.num_actions() != mdp.num_actions() {
            return Err(Error::InvalidArgument("Q table shape does not match the MDP".into()));
        }
    }
    Ok(())
}

/// Soft state value of `π` against `Q`: `Σ_a π(a|s) Q(s,a) − τ D(π‖π_b)(s)`,
/// zero at terminal states.
pub fn soft_state_values(
    pi: &PolicyTable,
    q: &QTable,
    pi_b: &PolicyTable,
    tau: f64,
    mdp: &FiniteMdp,
) -> Result<VTable> {
    let mut v = VTable::zeros(mdp.num_states());
    for s in mdp.non_terminal_states() {
        let expected: f64 = pi.row(s).iter().zip(q.row(s)).map(|(p, q)| p * q).sum();
        v.set(s, expected - tau * kl_at_state(pi, pi_b, s)?);
    }
    Ok(v)
}

/// `B^π Q`, with the expectation taken exactly over the kernel.
pub fn soft_bellman_apply(
    q: &QTable,
    pi: &PolicyTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    params: SoftRlParams,
) -> Result<QTable> {
    params.check_against(mdp)?;
    check_shapes(mdp, &[pi, pi_b], Some(q))?;
    let w = soft_state_values(pi, q, pi_b, params.tau, mdp)?;
    Ok(backup_with_state_values(mdp, &w, params.gamma))
}

/// `Q(s,a) = Σ_{s'} P(s'|s,a) (r + γ W(s'))` with `W(terminal) = 0`.
fn backup_with_state_values(mdp: &FiniteMdp, w: &VTable, gamma: f64) -> QTable {
    let mut out = QTable::zeros(mdp.num_states(), mdp.num_actions());
    for s in mdp.non_terminal_states() {
        for a in 0..mdp.num_actions() {
            let v: f64 = mdp
                .outcomes(s, a)
                .iter()
                .map(|o| {
                    let boot = if mdp.is_terminal(o.next) { 0.0 } else { w.get(o.next) };
                    o.prob * (o.reward + gamma * boot)
                })
                .sum();
            out.set(s, a, v);
        }
    }
    out
}

/// The affine form `B^π Q = c + M Q` restricted to non-terminal pairs.
pub struct PairOperator {
    /// `pairs[i] = (s, a)` for row `i`.
    pub pairs: Vec<(usize, usize)>,
    /// Row of each `(s, a)`; `None` at terminal states.
    pub index: Vec<Option<usize>>,
    pub m: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl PairOperator {
    pub fn build(mdp: &FiniteMdp, pi: &PolicyTable, pi_b: &PolicyTable, params: SoftRlParams) -> Result<Self> {
        params.check_against(mdp)?;
        check_shapes(mdp, &[pi, pi_b], None)?;
        let na = mdp.num_actions();
        let mut index = vec![None; mdp.num_states() * na];
        let mut pairs = Vec::new();
        for s in mdp.non_terminal_states() {
            for a in 0..na {
                index[s * na + a] = Some(pairs.len());
                pairs.push((s, a));
            }
        }
        let n = pairs.len();
        if n > DENSE_PAIR_BUDGET {
            return Err(Error::BudgetExceeded {
                required: n,
                budget: DENSE_PAIR_BUDGET,
            });
        }
        let kl = kl_by_state(pi, pi_b, mdp)?;
        let g = params.gamma;
        let mut m = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        for (i, &(s, a)) in pairs.iter().enumerate() {
            for o in mdp.outcomes(s, a) {
                c[i] += o.prob * o.reward;
                if mdp.is_terminal(o.next) {
                    continue;
                }
                c[i] -= o.prob * g * params.tau * kl[o.next];
                for a2 in 0..na {
                    let j = index[o.next * na + a2].expect("non-terminal pair");
                    m[(i, j)] += g * o.prob * pi.prob(o.next, a2);
                }
            }
        }
        Ok(Self { pairs, index, m, c })
    }

    pub fn gather(&self, q: &QTable) -> DVector<f64> {
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(s, a)| q.get(s, a)))
    }

    pub fn scatter(&self, x: &DVector<f64>, num_states: usize, num_actions: usize) -> QTable {
        let mut q = QTable::zeros(num_states, num_actions);
        for (i, &(s, a)) in self.pairs.iter().enumerate() {
            q.set(s, a, x[i]);
        }
        q
    }
}

/// `B^π_λ Q = (1−λ) Σ_{n≥1} λ^{n−1} (B^π)^n Q`, evaluated in closed form as
/// `(I − λM)^{-1} (c + (1−λ) M Q)`.
pub fn lambda_bellman_apply(
    q: &QTable,
    pi: &PolicyTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    params: SoftRlParams,
    lambda: f64,
) -> Result<QTable> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1), got {lambda}"
        )));
    }
    if lambda * params.gamma >= 1.0 {
        return Err(Error::InvalidArgument("lambda * gamma must be below 1".into()));
    }
    check_shapes(mdp, &[pi, pi_b], Some(q))?;
    let op = PairOperator::build(mdp, pi, pi_b, params)?;
    let n = op.pairs.len();
    let qv = op.gather(q);
    let rhs = &op.c + (&op.m * &qv) * (1.0 - lambda);
    let lhs = DMatrix::identity(n, n) - &op.m * lambda;
    let x = lhs.lu().solve(&rhs).ok_or(Error::SingularSystem)?;
    Ok(op.scatter(&x, mdp.num_states(), mdp.num_actions()))
}

/// Conservative λ-backup `α B^{π[Q]}_λ Q + (1−α) Q` with `π[Q]` the
/// Boltzmann policy of `Q`.
pub fn conservative_backup(
    q: &QTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    params: SoftRlParams,
    lambda: f64,
    alpha: f64,
) -> Result<QTable> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let (pi_q, _) = boltzmann(q, pi_b, params.tau)?;
    let backed = lambda_bellman_apply(q, &pi_q, mdp, pi_b, params, lambda)?;
    let mut out = backed;
    for (o, &old) in out.values_mut().iter_mut().zip(q.values()) {
        *o = alpha * *o + (1.0 - alpha) * old;
    }
    out.zero_rows(mdp.terminal_flags());
    Ok(out)
}

/// Boltzmann policy and state value of `Q` against `π_b`:
/// `V(s) = τ log Σ_a π_b(a|s) exp(Q(s,a)/τ)`,
/// `π(a|s) = π_b(a|s) exp((Q(s,a) − V(s))/τ)`.
///
/// Zero entries of `π_b` stay zero in `π`. The returned policy carries exact
/// log-probabilities.
pub fn boltzmann(q: &QTable, pi_b: &PolicyTable, tau: f64) -> Result<(PolicyTable, VTable)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if q.num_states() != pi_b.num_states() || q.num_actions() != pi_b.num_actions() {
        return Err(Error::InvalidArgument("Q and reference policy shapes differ".into()));
    }
    let (ns, na) = (q.num_states(), q.num_actions());
    let mut log_probs = vec![0.0; ns * na];
    let mut v = vec![0.0; ns];
    let mut scaled = vec![0.0; na];
    for s in 0..ns {
        for a in 0..na {
            scaled[a] = pi_b.log_prob(s, a) + q.get(s, a) / tau;
        }
        let top = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::NonFinite(format!("Boltzmann normaliser at state {s}")));
        }
        for x in scaled.iter_mut() {
            *x -= top;
        }
        let lse = log_sum_exp(&scaled);
        v[s] = tau * (top + lse);
        for a in 0..na {
            log_probs[s * na + a] = scaled[a] - lse;
        }
    }
    Ok((PolicyTable::from_log_probs(ns, na, log_probs)?, VTable::from_values(v)?))
}

/// Inverse of the Boltzmann map: `Q(s,a) = τ log(π(a|s)/π_b(a|s)) + V(s)`.
pub fn q_from_pi_v(pi: &PolicyTable, v: &VTable, pi_b: &PolicyTable, tau: f64) -> Result<QTable> {
    if !pi.same_shape(pi_b) || v.len() != pi.num_states() {
        return Err(Error::InvalidArgument("policy/value shapes differ".into()));
    }
    let (ns, na) = (pi.num_states(), pi.num_actions());
    let mut q = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let lp = pi.log_prob(s, a);
            if lp == f64::NEG_INFINITY {
                return Err(Error::SupportViolation {
                    state: s,
                    action: a,
                    detail: "policy probability is zero",
                });
            }
            let lb = pi_b.log_prob(s, a);
            if lb == f64::NEG_INFINITY {
                return Err(Error::SupportViolation {
                    state: s,
                    action: a,
                    detail: "reference probability is zero",
                });
            }
            q.set(s, a, tau * (lp - lb) + v.get(s));
        }
    }
    Ok(q)
}

/// `Q^π`, the unique fixed point of `B^π`.
///
/// Episodic MDPs are solved by backward induction; all others by a dense
/// linear solve of `(I − M) Q = c`, which needs `γ < 1`.
pub fn exact_soft_q(pi: &PolicyTable, mdp: &FiniteMdp, pi_b: &PolicyTable, params: SoftRlParams) -> Result<QTable> {
    if mdp.is_episodic() {
        soft_q_backward_induction(pi, mdp, pi_b, params)
    } else {
        soft_q_linear_solve(pi, mdp, pi_b, params)
    }
}

pub fn soft_q_linear_solve(
    pi: &PolicyTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    params: SoftRlParams,
) -> Result<QTable> {
    if params.gamma >= 1.0 && !mdp.is_episodic() {
        return Err(Error::NotEpisodic);
    }
    let op = PairOperator::build(mdp, pi, pi_b, params)?;
    let n = op.pairs.len();
    let lhs = DMatrix::identity(n, n) - &op.m;
    let x = lhs.lu().solve(&op.c).ok_or(Error::SingularSystem)?;
    Ok(op.scatter(&x, mdp.num_states(), mdp.num_actions()))
}

pub fn soft_q_backward_induction(
    pi: &PolicyTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    params: SoftRlParams,
) -> Result<QTable> {
    params.check_against(mdp)?;
    check_shapes(mdp, &[pi, pi_b], None)?;
    let order = mdp.topological_order().ok_or(Error::NotEpisodic)?;
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    let mut w = VTable::zeros(mdp.num_states());
    for &s in order.iter().rev() {
        for a in 0..mdp.num_actions() {
            let v: f64 = mdp
                .outcomes(s, a)
                .iter()
                .map(|o| {
                    let boot = if mdp.is_terminal(o.next) { 0.0 } else { w.get(o.next) };
                    o.prob * (o.reward + params.gamma * boot)
                })
                .sum();
            q.set(s, a, v);
        }
        let expected: f64 = pi.row(s).iter().zip(q.row(s)).map(|(p, q)| p * q).sum();
        w.set(s, expected - params.tau * kl_at_state(pi, pi_b, s)?);
    }
    Ok(q)
}

/// Soft-optimal action values with their Boltzmann policy and value.
#[derive(Debug, Clone)]
pub struct SoftOptimal {
    pub q: QTable,
    pub policy: PolicyTable,
    pub v: VTable,
}

/// Fixed point of `Q ← B^{π[Q]} Q`.
///
/// Episodic MDPs use backward induction
/// `V*(s) = τ log Σ_a π_b(a|s) exp(Q*(s,a)/τ)`; others use soft value
/// iteration to `‖ΔQ‖∞ ≤ 1e-10`.
pub fn solve_soft_optimal(mdp: &FiniteMdp, pi_b: &PolicyTable, params: SoftRlParams) -> Result<SoftOptimal> {
    if mdp.is_episodic() {
        soft_backward_induction(mdp, pi_b, params)
    } else {
        soft_value_iteration(mdp, pi_b, params, VALUE_ITERATION_TOL, VALUE_ITERATION_MAX)
    }
}

pub fn soft_backward_induction(mdp: &FiniteMdp, pi_b: &PolicyTable, params: SoftRlParams) -> Result<SoftOptimal> {
    params.check_against(mdp)?;
    check_shapes(mdp, &[pi_b], None)?;
    let order = mdp.topological_order().ok_or(Error::NotEpisodic)?;
    let na = mdp.num_actions();
    let mut q = QTable::zeros(mdp.num_states(), na);
    let mut v = VTable::zeros(mdp.num_states());
    let mut scaled = vec![0.0; na];
    for &s in order.iter().rev() {
        for a in 0..na {
            let val: f64 = mdp
                .outcomes(s, a)
                .iter()
                .map(|o| {
                    let boot = if mdp.is_terminal(o.next) { 0.0 } else { v.get(o.next) };
                    o.prob * (o.reward + params.gamma * boot)
                })
                .sum();
            q.set(s, a, val);
            scaled[a] = pi_b.log_prob(s, a) + val / params.tau;
        }
        v.set(s, params.tau * log_sum_exp(&scaled));
    }
    let (policy, v_check) = boltzmann(&q, pi_b, params.tau)?;
    debug_assert!(v_check.sup_dist(&v) < 1e-9 * (1.0 + v.values().iter().fold(0.0f64, |m, x| m.max(x.abs()))));
    Ok(SoftOptimal { q, policy, v: v_check })
}

pub fn soft_value_iteration(
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    params: SoftRlParams,
    tol: f64,
    max_iterations: usize,
) -> Result<SoftOptimal> {
    params.check_against(mdp)?;
    check_shapes(mdp, &[pi_b], None)?;
    if params.gamma >= 1.0 && !mdp.is_episodic() {
        return Err(Error::NotEpisodic);
    }
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let (_, v) = boltzmann(&q, pi_b, params.tau)?;
        let next = backup_with_state_values(mdp, &v, params.gamma);
        residual = next.sup_dist(&q);
        q = next;
        if residual <= tol {
            let (policy, v) = boltzmann(&q, pi_b, params.tau)?;
            return Ok(SoftOptimal { q, policy, v });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iterations,
        residual,
    })
}

/// Outcome of the KL-regularised improvement test.
#[derive(Debug, Clone)]
pub struct ImprovementVerdict {
    /// Per state: `D(π_new‖π_B) ≤ D(π‖π_B)`; always true at terminal states.
    pub per_state: Vec<bool>,
    /// `D(π‖π_B) − D(π_new‖π_B)` per state (zero at terminal states).
    pub margins: Vec<f64>,
    pub holds: bool,
}

/// Rounding allowance for the per-state KL comparison.
pub const IMPROVEMENT_KL_TOL: f64 = 1e-12;

/// Checks `D(π_new(·|s)‖π_B(·|s)) ≤ D(π(·|s)‖π_B(·|s))` at every
/// non-terminal state, with `π_B = Boltzmann(Q)`.
pub fn improvement_condition_holds(
    pi_new: &PolicyTable,
    pi: &PolicyTable,
    q: &QTable,
    pi_b: &PolicyTable,
    tau: f64,
    mdp: &FiniteMdp,
) -> Result<ImprovementVerdict> {
    check_shapes(mdp, &[pi_new, pi, pi_b], Some(q))?;
    let (pi_boltz, _) = boltzmann(q, pi_b, tau)?;
    let mut per_state = vec![true; mdp.num_states()];
    let mut margins = vec![0.0; mdp.num_states()];
    for s in mdp.non_terminal_states() {
        let new_kl = kl_at_state(pi_new, &pi_boltz, s)?;
        let old_kl = kl_at_state(pi, &pi_boltz, s)?;
        margins[s] = old_kl - new_kl;
        per_state[s] = new_kl <= old_kl + IMPROVEMENT_KL_TOL;
    }
    let holds = per_state.iter().all(|&b| b);
    Ok(ImprovementVerdict {
        per_state,
        margins,
        holds,
    })
}

/// Expected KL-regularised return of `π` from the initial distribution.
pub fn policy_objective(mdp: &FiniteMdp, pi: &PolicyTable, pi_b: &PolicyTable, params: SoftRlParams) -> Result<f64> {
    let q = exact_soft_q(pi, mdp, pi_b, params)?;
    let w = soft_state_values(pi, &q, pi_b, params.tau, mdp)?;
    Ok(mdp
        .initial_distribution()
        .iter()
        .enumerate()
        .map(|(s, m)| m * w.get(s))
        .sum())
}

/// Optimal KL-regularised return `Σ_s μ(s) V*(s)`.
pub fn optimal_objective(mdp: &FiniteMdp, pi_b: &PolicyTable, params: SoftRlParams) -> Result<f64> {
    let opt = solve_soft_optimal(mdp, pi_b, params)?;
    Ok(mdp
        .initial_distribution()
        .iter()
        .enumerate()
        .map(|(s, m)| m * opt.v.get(s))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Outcome;

    fn self_loop(reward: f64, gamma: f64) -> FiniteMdp {
        FiniteMdp::new(
            1,
            1,
            vec![vec![Outcome {
                next: 0,
                prob: 1.0,
                reward,
            }]],
            vec![false],
            gamma,
            vec![1.0],
        )
        .unwrap()
    }

    /// One decision state, each action ending in its own terminal state.
    fn bandit(rewards: &[f64]) -> FiniteMdp {
        let n = rewards.len();
        let mut outcomes = Vec::new();
        for (a, &r) in rewards.iter().enumerate() {
            outcomes.push(vec![Outcome {
                next: 1 + a,
                prob: 1.0,
                reward: r,
            }]);
        }
        for _ in 0..n {
            for _ in 0..n {
                outcomes.push(vec![]);
            }
        }
        let mut terminal = vec![true; n + 1];
        terminal[0] = false;
        let mut initial = vec![0.0; n + 1];
        initial[0] = 1.0;
        FiniteMdp::new(n + 1, n, outcomes, terminal, 1.0, initial).unwrap()
    }

    #[test]
    fn kl_examples() {
        let pi = PolicyTable::from_probs(1, 2, vec![0.75, 0.25]).unwrap();
        let pb = PolicyTable::from_probs(1, 2, vec![0.5, 0.5]).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl_at_state(&pi, &pb, 0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.130812).abs() < 1e-6);
        assert_eq!(kl_at_state(&pi, &pi, 0).unwrap(), 0.0);
        let bad = PolicyTable::from_probs(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(kl_at_state(&pi, &bad, 0), Err(Error::SupportViolation { .. })));
    }

    #[test]
    fn bellman_single_loop() {
        let mdp = self_loop(1.0, 0.9);
        let pi = PolicyTable::uniform(1, 1);
        let p = SoftRlParams::for_mdp(&mdp, 1.0).unwrap();
        let bq = soft_bellman_apply(&QTable::zeros(1, 1), &pi, &mdp, &pi, p).unwrap();
        assert_eq!(bq.get(0, 0), 1.0);
        let q = exact_soft_q(&pi, &mdp, &pi, p).unwrap();
        assert!((q.get(0, 0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_mismatch_is_rejected() {
        let mdp = self_loop(1.0, 0.9);
        let pi = PolicyTable::uniform(1, 1);
        let p = SoftRlParams::new(1.0, 0.5).unwrap();
        assert!(soft_bellman_apply(&QTable::zeros(1, 1), &pi, &mdp, &pi, p).is_err());
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let mdp = self_loop(1.0, 0.9);
        let pi = PolicyTable::uniform(1, 1);
        let p = SoftRlParams::for_mdp(&mdp, 1.0).unwrap();
        let q = QTable::from_values(1, 1, vec![3.0]).unwrap();
        let a = lambda_bellman_apply(&q, &pi, &mdp, &pi, p, 0.0).unwrap();
        let b = soft_bellman_apply(&q, &pi, &mdp, &pi, p).unwrap();
        assert!(a.sup_dist(&b) < 1e-15);
        assert!(lambda_bellman_apply(&q, &pi, &mdp, &pi, p, 1.0).is_err());
    }

    #[test]
    fn alpha_out_of_range() {
        let mdp = self_loop(1.0, 0.9);
        let pi = PolicyTable::uniform(1, 1);
        let p = SoftRlParams::for_mdp(&mdp, 1.0).unwrap();
        let q = QTable::zeros(1, 1);
        assert!(conservative_backup(&q, &mdp, &pi, p, 0.5, 0.0).is_err());
        assert!(conservative_backup(&q, &mdp, &pi, p, 0.5, 1.5).is_err());
    }

    #[test]
    fn boltzmann_examples() {
        let pb = PolicyTable::uniform(1, 2);
        let q = QTable::from_values(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        let (pi, v) = boltzmann(&q, &pb, 1.0).unwrap();
        assert!((v.get(0) - 1.5f64.ln()).abs() < 1e-15);
        assert!((pi.prob(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi.prob(0, 1) - 1.0 / 3.0).abs() < 1e-15);

        let (pi0, v0) = boltzmann(&QTable::zeros(1, 2), &pb, 0.7).unwrap();
        assert!(pi0.tv_at(&pb, 0) < 1e-15);
        assert!(v0.get(0).abs() < 1e-15);

        let shifted = QTable::from_values(1, 2, vec![2f64.ln() + 1e6, 1e6]).unwrap();
        let (pis, vs) = boltzmann(&shifted, &pb, 1.0).unwrap();
        assert!((vs.get(0) - (1e6 + 1.5f64.ln())).abs() < 1e-9);
        assert!(pis.tv_at(&pi, 0) < 1e-9);
    }

    #[test]
    fn boltzmann_keeps_reference_zeros() {
        let pb = PolicyTable::from_probs(1, 2, vec![1.0, 0.0]).unwrap();
        let q = QTable::from_values(1, 2, vec![0.0, 5.0]).unwrap();
        let (pi, v) = boltzmann(&q, &pb, 1.0).unwrap();
        assert_eq!(pi.prob(0, 1), 0.0);
        assert!(v.get(0).abs() < 1e-15);
    }

    #[test]
    fn inverse_map_example() {
        let pi = PolicyTable::from_probs(1, 2, vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        let pb = PolicyTable::uniform(1, 2);
        let v = VTable::from_values(vec![1.5f64.ln()]).unwrap();
        let q = q_from_pi_v(&pi, &v, &pb, 1.0).unwrap();
        assert!((q.get(0, 0) - 2f64.ln()).abs() < 1e-12);
        assert!(q.get(0, 1).abs() < 1e-12);

        let same = q_from_pi_v(&pb, &v, &pb, 1.0).unwrap();
        assert!(same.row(0).iter().all(|&x| (x - v.get(0)).abs() < 1e-15));

        let zero = PolicyTable::from_probs(1, 2, vec![1.0, 0.0]).unwrap();
        match q_from_pi_v(&zero, &v, &pb, 1.0) {
            Err(Error::SupportViolation {
                state: 0, action: 1, ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bandit_optimum_closed_form() {
        let mdp = bandit(&[1.0, 0.0]);
        let pb = PolicyTable::uniform(mdp.num_states(), 2);
        let p = SoftRlParams::for_mdp(&mdp, 1.0).unwrap();
        let opt = solve_soft_optimal(&mdp, &pb, p).unwrap();
        let e = std::f64::consts::E;
        assert!((opt.policy.prob(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((opt.v.get(0) - ((e + 1.0) / 2.0).ln()).abs() < 1e-12);
        assert!((opt.v.get(0) - 0.6201).abs() < 1e-4);

        let flat = solve_soft_optimal(&mdp, &pb, SoftRlParams::for_mdp(&mdp, 1e6).unwrap()).unwrap();
        assert!(flat.policy.tv_at(&pb, 0) < 1e-5);
    }

    #[test]
    fn gamma_zero_gives_immediate_reward() {
        let mdp = FiniteMdp::new(
            2,
            2,
            vec![
                vec![
                    Outcome {
                        next: 0,
                        prob: 0.5,
                        reward: 1.0,
                    },
                    Outcome {
                        next: 1,
                        prob: 0.5,
                        reward: 3.0,
                    },
                ],
                vec![Outcome {
                    next: 1,
                    prob: 1.0,
                    reward: -1.0,
                }],
                vec![Outcome {
                    next: 0,
                    prob: 1.0,
                    reward: 0.5,
                }],
                vec![Outcome {
                    next: 0,
                    prob: 1.0,
                    reward: 2.0,
                }],
            ],
            vec![false, false],
            0.0,
            vec![0.5, 0.5],
        )
        .unwrap();
        let pi = PolicyTable::from_probs(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let pb = PolicyTable::uniform(2, 2);
        let p = SoftRlParams::for_mdp(&mdp, 0.5).unwrap();
        let q = exact_soft_q(&pi, &mdp, &pb, p).unwrap();
        let bq = soft_bellman_apply(&QTable::from_values(2, 2, vec![9.0; 4]).unwrap(), &pi, &mdp, &pb, p).unwrap();
        for (s, a, r) in [(0, 0, 2.0), (0, 1, -1.0), (1, 0, 0.5), (1, 1, 2.0)] {
            assert!((q.get(s, a) - r).abs() < 1e-14);
            assert!((bq.get(s, a) - r).abs() < 1e-14);
        }
    }

    #[test]
    fn improvement_reflexive_and_boltzmann() {
        let mdp = bandit(&[0.3, -0.2, 0.9]);
        let pb = PolicyTable::uniform(mdp.num_states(), 3);
        let pi =
            PolicyTable::from_probs(mdp.num_states(), 3, [vec![0.2, 0.5, 0.3], vec![1.0 / 3.0; 9]].concat()).unwrap();
        let p = SoftRlParams::for_mdp(&mdp, 0.5).unwrap();
        let q = exact_soft_q(&pi, &mdp, &pb, p).unwrap();
        let same = improvement_condition_holds(&pi, &pi, &q, &pb, 0.5, &mdp).unwrap();
        assert!(same.holds);
        assert!(same.margins.iter().all(|m| *m == 0.0));
        let (boltz, _) = boltzmann(&q, &pb, 0.5).unwrap();
        assert!(
            improvement_condition_holds(&boltz, &pi, &q, &pb, 0.5, &mdp)
                .unwrap()
                .holds
        );
    }
}
