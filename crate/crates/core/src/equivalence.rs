//! Q-space conservative λ-backups versus the proximal (π, V)-space updates.
//!
//! The Q-space sequence is `Q_{k+1} = B^{λ,α} Q_k`, computed with
//! [`crate::soft::conservative_backup`]. The (π, V)-space sequence never
//! touches that operator: from `(π_k, V_k)` it forms the expected TD errors
//! `δ(s,a) = E[r + γV_k(s')] − Q_k(s,a)`, the expected error terms
//! `Δ = (I − λM_k)^{-1} δ`, advantages `Â = Q_k + Δ − V_k`, and then
//!
//! - `π_{k+1}` maximises `Σ_a π Â − τ D(π‖π_b) − β D(π‖π_k)` per state,
//!   `β = τ(1−α)/α`;
//! - `V_{k+1}(s)` minimises `E_a[(V(s) − (Q_k + αΔ − τ log(π_{k+1}/π_b)))²]`
//!   under uniform action weights.
//!
//! Agreement means `q_from_pi_v(π_k, V_k) = Q_k` at every iteration.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::mdp::{visitation_distribution, FiniteMdp};
use crate::rng::{derive_seed, seeded};
use crate::soft::{boltzmann, conservative_backup, q_from_pi_v, solve_soft_optimal, SoftRlParams, DENSE_PAIR_BUDGET};
use crate::tables::{log_sum_exp, PolicyTable, QTable, VTable};

/// Per-iteration gap allowed between the two sequences.
pub const DISCREPANCY_TOL: f64 = 1e-8;
/// Total-variation gap allowed between numeric ascent and the closed form.
pub const ASCENT_TV_TOL: f64 = 1e-6;
/// Slack on the per-step contraction envelope.
/// Largest allowed spread of the V target mean across actions.
pub const SPREAD_TOL: f64 = 1e-10;
pub const ENVELOPE_SLACK: f64 = 1e-10;

/// `β = τ(1−α)/α`.
pub fn beta_from_alpha(alpha: f64, tau: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(tau * (1.0 - alpha) / alpha)
}

/// Settings shared by both update sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateParams {
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl UpdateParams {
    fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        SoftRlParams::for_mdp(mdp, self.tau)?;
        beta_from_alpha(self.alpha, self.tau)?;
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1), got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// One Q-space step `Q_{k+1} = B^{λ,α} Q_k`.
pub fn q_space_iterate(q: &QTable, mdp: &FiniteMdp, pi_b: &PolicyTable, up: UpdateParams) -> Result<QTable> {
    up.validate(mdp)?;
    conservative_backup(q, mdp, pi_b, SoftRlParams::for_mdp(mdp, up.tau)?, up.lambda, up.alpha)
}

/// Expected λ-return quantities of `(π_k, V_k)`.
#[derive(Debug, Clone)]
pub struct ExpectedReturns {
    /// `Q_k = τ log(π_k/π_b) + V_k`.
    pub q: QTable,
    /// `Δ = (I − λM_k)^{-1} δ` on non-terminal pairs, zero elsewhere.
    pub error_terms: QTable,
    /// `Â = Q_k + Δ − V_k`.
    pub advantages: QTable,
}

/// Solves for the expected error terms of the λ-recursion
/// `Δ_t = δ_t + λγΔ_{t+1}` under `π_k`.
pub fn expected_returns(
    pi_k: &PolicyTable,
    v_k: &VTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    up: UpdateParams,
) -> Result<ExpectedReturns> {
    up.validate(mdp)?;
    mdp.check_policy(pi_k)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut q = q_from_pi_v(pi_k, v_k, pi_b, up.tau)?;
    q.zero_rows(mdp.terminal_flags());
    let mut row_of = vec![usize::MAX; ns * na];
    let mut pairs = Vec::new();
    for s in mdp.non_terminal_states() {
        for a in 0..na {
            row_of[s * na + a] = pairs.len();
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
    let g = mdp.gamma();
    let mut lhs = DMatrix::<f64>::identity(n, n);
    let mut delta = DVector::<f64>::zeros(n);
    for (i, &(s, a)) in pairs.iter().enumerate() {
        let mut target = 0.0;
        for o in mdp.outcomes(s, a) {
            if mdp.is_terminal(o.next) {
                target += o.prob * o.reward;
                continue;
            }
            target += o.prob * (o.reward + g * v_k.get(o.next));
            for a2 in 0..na {
                lhs[(i, row_of[o.next * na + a2])] -= up.lambda * g * o.prob * pi_k.prob(o.next, a2);
            }
        }
        delta[i] = target - q.get(s, a);
    }
    let solved = lhs.lu().solve(&delta).ok_or(Error::SingularSystem)?;
    let mut error_terms = QTable::zeros(ns, na);
    let mut advantages = QTable::zeros(ns, na);
    for (i, &(s, a)) in pairs.iter().enumerate() {
        error_terms.set(s, a, solved[i]);
        advantages.set(s, a, q.get(s, a) + solved[i] - v_k.get(s));
    }
    Ok(ExpectedReturns {
        q,
        error_terms,
        advantages,
    })
}

/// The per-state proximal policy objective
/// `f_s(π) = Σ_a π(a|s) Â(s,a) − τ D(π‖π_b)(s) − β D(π‖π_k)(s)`.
#[derive(Debug, Clone)]
pub struct PiObjective<'a> {
    pub advantages: &'a QTable,
    pub pi_k: &'a PolicyTable,
    pub pi_b: &'a PolicyTable,
    pub tau: f64,
    pub beta: f64,
}

impl PiObjective<'_> {
    /// `c_a = Â(s,a) + τ log π_b(a|s) + β log π_k(a|s)`, so that
    /// `f_s(π) = Σ_a π_a c_a − (τ+β) Σ_a π_a log π_a`.
    fn coefficients(&self, s: usize) -> Vec<f64> {
        (0..self.pi_b.num_actions())
            .map(|a| {
                let prev = if self.beta > 0.0 {
                    self.beta * self.pi_k.log_prob(s, a)
                } else {
                    0.0
                };
                self.advantages.get(s, a) + self.tau * self.pi_b.log_prob(s, a) + prev
            })
            .collect()
    }

    /// Objective value at state `s` for a probability row given by its
    /// log-probabilities.
    pub fn value_at(&self, s: usize, log_probs: &[f64]) -> f64 {
        let w = self.tau + self.beta;
        self.coefficients(s)
            .iter()
            .zip(log_probs)
            .map(|(c, lp)| {
                if *lp == f64::NEG_INFINITY {
                    0.0
                } else {
                    lp.exp() * (c - w * lp)
                }
            })
            .sum()
    }

    /// Objective of a whole policy, weighted over states.
    pub fn total(&self, policy: &PolicyTable, weights: &[f64]) -> f64 {
        let na = policy.num_actions();
        weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(s, w)| {
                let lps: Vec<f64> = (0..na).map(|a| policy.log_prob(s, a)).collect();
                w * self.value_at(s, &lps)
            })
            .sum()
    }

    /// Unique maximiser `π ∝ exp(c / (τ+β))` at state `s`, as log-probabilities.
    pub fn closed_form_row(&self, s: usize) -> Vec<f64> {
        let w = self.tau + self.beta;
        let scaled: Vec<f64> = self.coefficients(s).iter().map(|c| c / w).collect();
        let lse = log_sum_exp(&scaled);
        scaled.iter().map(|x| x - lse).collect()
    }

    /// Damped Newton ascent on the logits of state `s` (last logit pinned to
    /// zero), falling back to backtracked natural-gradient steps where the
    /// Hessian is not negative definite. Returns the final log-probabilities.
    pub fn ascend(&self, s: usize, start_logits: &[f64], max_iterations: usize) -> AscentOutcome {
        let c = self.coefficients(s);
        let w = self.tau + self.beta;
        let n = c.len();
        let mut z: Vec<f64> = start_logits.iter().map(|x| x - start_logits[n - 1]).collect();
        let eval = |z: &[f64]| -> (Vec<f64>, f64) {
            let lse = log_sum_exp(z);
            let lp: Vec<f64> = z.iter().map(|x| x - lse).collect();
            let f = lp.iter().zip(&c).map(|(l, ci)| l.exp() * (ci - w * l)).sum();
            (lp, f)
        };
        let (mut lp, mut f) = eval(&z);
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;
        while iterations < max_iterations {
            iterations += 1;
            let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let v: Vec<f64> = c.iter().zip(&lp).map(|(ci, l)| ci - w * l).collect();
            let vbar: f64 = p.iter().zip(&v).map(|(pi, vi)| pi * vi).sum();
            let h: Vec<f64> = p.iter().zip(&v).map(|(pi, vi)| pi * (vi - vbar)).collect();
            grad_norm = h.iter().fold(0.0, |m, x| m.max(x.abs()));
            if grad_norm <= 1e-15 {
                break;
            }
            let m = n - 1;
            let g = DVector::from_iterator(m, h[..m].iter().copied());
            let mut hess = DMatrix::<f64>::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    let d = if i == j { 1.0 } else { 0.0 };
                    hess[(i, j)] = d * h[i] - h[i] * p[j] - p[i] * h[j] - w * (d * p[i] - p[i] * p[j]);
                }
            }
            let newton = (-hess).cholesky().map(|ch| ch.solve(&g));
            let (mut dir, is_newton) = match newton {
                Some(d) => (d, true),
                None => (DVector::from_iterator(m, (0..m).map(|i| (v[i] - v[m]) / w)), false),
            };
            let longest = dir.amax();
            if longest > ASCENT_MAX_STEP {
                dir *= ASCENT_MAX_STEP / longest;
            }
            let slope = g.dot(&dir);
            if is_newton && grad_norm < 1e-6 {
                for i in 0..m {
                    z[i] += dir[i];
                }
                let (l2, f2) = eval(&z);
                lp = l2;
                f = f2;
                continue;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = (0..n).map(|i| if i < m { z[i] + t * dir[i] } else { 0.0 }).collect();
                let (l2, f2) = eval(&trial);
                if f2 >= f + 1e-4 * t * slope {
                    z = trial;
                    lp = l2;
                    f = f2;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        AscentOutcome {
            log_probs: lp,
            objective: f,
            iterations,
            grad_norm,
        }
    }
}

/// Result of a numeric ascent at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentOutcome {
    pub log_probs: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Largest logit change of one ascent step.
pub const ASCENT_MAX_STEP: f64 = 2.0;

/// Iteration cap for numeric ascent.
pub const ASCENT_MAX_ITERATIONS: usize = 500;

/// `π_{k+1}` in closed form from `(π_k, V_k)`.
pub fn pi_space_maximizer(
    pi_k: &PolicyTable,
    v_k: &VTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    up: UpdateParams,
) -> Result<PolicyTable> {
    let er = expected_returns(pi_k, v_k, mdp, pi_b, up)?;
    closed_form_policy(&er, pi_k, pi_b, up)
}

fn closed_form_policy(
    er: &ExpectedReturns,
    pi_k: &PolicyTable,
    pi_b: &PolicyTable,
    up: UpdateParams,
) -> Result<PolicyTable> {
    let objective = PiObjective {
        advantages: &er.advantages,
        pi_k,
        pi_b,
        tau: up.tau,
        beta: beta_from_alpha(up.alpha, up.tau)?,
    };
    let (ns, na) = (pi_b.num_states(), pi_b.num_actions());
    let mut lps = Vec::with_capacity(ns * na);
    for s in 0..ns {
        lps.extend(objective.closed_form_row(s));
    }
    PolicyTable::from_log_probs(ns, na, lps)
}

/// `V_{k+1}` together with the spread of the per-action target means.
#[derive(Debug, Clone)]
pub struct VUpdate {
    pub v: VTable,
    /// `max_a − min_a` of the conditional target mean, per state.
    pub action_spread: Vec<f64>,
}

/// Exact minimiser of the V loss under uniform action weights.
pub fn v_space_minimizer(
    pi_k: &PolicyTable,
    v_k: &VTable,
    pi_next: &PolicyTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    up: UpdateParams,
) -> Result<VUpdate> {
    let er = expected_returns(pi_k, v_k, mdp, pi_b, up)?;
    v_from_returns(&er, pi_next, mdp, pi_b, up)
}

fn v_from_returns(
    er: &ExpectedReturns,
    pi_next: &PolicyTable,
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    up: UpdateParams,
) -> Result<VUpdate> {
    let na = mdp.num_actions();
    let mut v = VTable::zeros(mdp.num_states());
    let mut spread = vec![0.0; mdp.num_states()];
    for s in mdp.non_terminal_states() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for a in 0..na {
            let lp = pi_next.log_prob(s, a);
            let lb = pi_b.log_prob(s, a);
            if lp == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
                return Err(Error::SupportViolation {
                    state: s,
                    action: a,
                    detail: "V target needs full support",
                });
            }
            let y = er.q.get(s, a) + up.alpha * er.error_terms.get(s, a) - up.tau * (lp - lb);
            lo = lo.min(y);
            hi = hi.max(y);
            sum += y;
        }
        v.set(s, sum / na as f64);
        spread[s] = hi - lo;
    }
    Ok(VUpdate {
        v,
        action_spread: spread,
    })
}

/// State weighting of the policy objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StateWeighting {
    /// Uniform over non-terminal states.
    #[default]
    Uniform,
    /// Normalised state visitation of `π_k`.
    Visitation,
}

/// Options of [`run_equivalence_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceOptions {
    pub iterations: usize,
    /// Check the closed form against numeric ascent at every iteration.
    pub ascent: bool,
    /// Random starting points per state for the ascent, besides `π_k`.
    pub ascent_random_starts: usize,
    /// Random candidate policies per state that the closed form must beat.
    pub dominance_candidates: usize,
    pub weighting: StateWeighting,
    pub seed: u64,
    /// Test hook: perturbs `V_{k+1}` at this iteration.
    pub corrupt_v_at: Option<usize>,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self {
            iterations: 10,
            ascent: true,
            ascent_random_starts: 2,
            dominance_candidates: 0,
            weighting: StateWeighting::Uniform,
            seed: 0,
            corrupt_v_at: None,
        }
    }
}

/// Per-iteration record of the comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `‖q_from_pi_v(π_k, V_k) − Q_k‖∞` over non-terminal pairs.
    pub discrepancy: f64,
    /// `‖Q_k − Q*‖∞`.
    pub residual: f64,
    /// Largest total-variation gap between ascent and closed form (0 when skipped).
    pub ascent_tv_gap: f64,
    /// Smallest advantage of the closed form over a random candidate.
    pub dominance_margin: Option<f64>,
    /// Largest per-action spread of the V target mean.
    pub action_spread: f64,
}

/// Outcome of a full comparison run.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub descriptor: String,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
    /// `1 − α + α γ(1−λ)/(1−λγ)`.
    pub envelope_modulus: f64,
    /// Whether every step satisfies `r_{k+1} ≤ m r_k + slack`. Reported
    /// only: the policy changes between iterations, so the bound is not
    /// guaranteed and does not enter `passed`.
    pub envelope_holds: bool,
    pub passed: bool,
    pub first_bad_iteration: Option<usize>,
}

impl EquivalenceReport {
    pub fn final_residual(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.residual)
    }

    pub fn max_discrepancy(&self) -> f64 {
        self.records.iter().map(|r| r.discrepancy).fold(0.0, f64::max)
    }

    pub fn max_ascent_gap(&self) -> f64 {
        self.records.iter().map(|r| r.ascent_tv_gap).fold(0.0, f64::max)
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mdp: {}", self.descriptor);
        let _ = writeln!(
            out,
            "tau={} gamma={} lambda={} alpha={} beta={} iterations={}",
            self.tau, self.gamma, self.lambda, self.alpha, self.beta, self.iterations
        );
        let _ = writeln!(
            out,
            "max_discrepancy={:e} (tol {:e})",
            self.max_discrepancy(),
            DISCREPANCY_TOL
        );
        let _ = writeln!(
            out,
            "max_ascent_tv_gap={:e} (tol {:e})",
            self.max_ascent_gap(),
            ASCENT_TV_TOL
        );
        let _ = writeln!(out, "final_residual={:e}", self.final_residual());
        let _ = writeln!(
            out,
            "envelope_modulus={} envelope_holds={}",
            self.envelope_modulus, self.envelope_holds
        );
        match self.first_bad_iteration {
            Some(k) => {
                let _ = writeln!(out, "result=FAIL first_bad_iteration={k}");
            }
            None => {
                let _ = writeln!(out, "result={}", if self.passed { "PASS" } else { "FAIL" });
            }
        }
        out
    }

    /// CSV with header `k,discrepancy,residual,ascent_tv_gap,dominance_margin,action_spread`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        w.write_record([
            "k",
            "discrepancy",
            "residual",
            "ascent_tv_gap",
            "dominance_margin",
            "action_spread",
        ])
        .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                r.discrepancy.to_string(),
                r.residual.to_string(),
                r.ascent_tv_gap.to_string(),
                r.dominance_margin.map(|m| m.to_string()).unwrap_or_default(),
                r.action_spread.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn non_terminal_gap(a: &QTable, b: &QTable, mdp: &FiniteMdp) -> f64 {
    mdp.non_terminal_states()
        .flat_map(|s| a.row(s).iter().zip(b.row(s)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn state_weights(mdp: &FiniteMdp, pi_k: &PolicyTable, weighting: StateWeighting) -> Result<Vec<f64>> {
    let mut w = match weighting {
        StateWeighting::Uniform => (0..mdp.num_states())
            .map(|s| if mdp.is_terminal(s) { 0.0 } else { 1.0 })
            .collect(),
        StateWeighting::Visitation => visitation_distribution(mdp, pi_k)?,
    };
    for s in 0..mdp.num_states() {
        if mdp.is_terminal(s) {
            w[s] = 0.0;
        } else if !(w[s] > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "state weighting has no mass at state {s}"
            )));
        }
    }
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Runs numeric ascent from `π_k` and from random starts at every state
/// with positive weight; returns the largest per-state TV gap to the closed
/// form. The weighted objective is separable across states, so each state
/// is ascended on its own.
fn ascent_gap<R: Rng>(
    objective: &PiObjective<'_>,
    closed: &PolicyTable,
    weights: &[f64],
    random_starts: usize,
    rng: &mut R,
) -> Result<f64> {
    let na = closed.num_actions();
    let mut worst: f64 = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut starts: Vec<Vec<f64>> = vec![(0..na).map(|a| objective.pi_k.log_prob(s, a)).collect()];
        for _ in 0..random_starts {
            starts.push((0..na).map(|_| rng.random_range(-3.0..3.0)).collect());
        }
        for start in starts {
            let out = objective.ascend(s, &start, ASCENT_MAX_ITERATIONS);
            let tv = 0.5
                * out
                    .log_probs
                    .iter()
                    .zip(closed.row(s))
                    .map(|(l, p)| (l.exp() - p).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
    }
    Ok(worst)
}

fn dominance_margin<R: Rng>(
    objective: &PiObjective<'_>,
    closed: &PolicyTable,
    mdp: &FiniteMdp,
    candidates: usize,
    rng: &mut R,
) -> Result<f64> {
    let na = closed.num_actions();
    let gamma = Gamma::<f64>::new(1.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut margin = f64::INFINITY;
    for s in mdp.non_terminal_states() {
        let best_lp: Vec<f64> = (0..na).map(|a| closed.log_prob(s, a)).collect();
        let best = objective.value_at(s, &best_lp);
        for _ in 0..candidates {
            let draws: Vec<f64> = (0..na).map(|_| gamma.sample(rng).max(1e-300)).collect();
            let total: f64 = draws.iter().sum();
            let lp: Vec<f64> = draws.iter().map(|d| (d / total).ln()).collect();
            margin = margin.min(best - objective.value_at(s, &lp));
        }
    }
    Ok(margin)
}

/// Runs both sequences for `options.iterations` steps from `Q_0`.
pub fn run_equivalence_check(
    mdp: &FiniteMdp,
    pi_b: &PolicyTable,
    up: UpdateParams,
    q0: &QTable,
    options: &EquivalenceOptions,
    descriptor: &str,
) -> Result<EquivalenceReport> {
    up.validate(mdp)?;
    let params = SoftRlParams::for_mdp(mdp, up.tau)?;
    let beta = beta_from_alpha(up.alpha, up.tau)?;
    let q_star = solve_soft_optimal(mdp, pi_b, params)?.q;
    let mut rng = seeded(derive_seed(options.seed, &[0x6571]));

    let mut q = q0.clone();
    q.zero_rows(mdp.terminal_flags());
    let (mut pi, mut v) = boltzmann(&q, pi_b, up.tau)?;

    let mut records = vec![IterationRecord {
        k: 0,
        discrepancy: non_terminal_gap(&q_from_pi_v(&pi, &v, pi_b, up.tau)?, &q, mdp),
        residual: non_terminal_gap(&q, &q_star, mdp),
        ascent_tv_gap: 0.0,
        dominance_margin: None,
        action_spread: 0.0,
    }];
    for k in 0..options.iterations {
        let q_next = conservative_backup(&q, mdp, pi_b, params, up.lambda, up.alpha)?;

        let er = expected_returns(&pi, &v, mdp, pi_b, up)?;
        let pi_next = closed_form_policy(&er, &pi, pi_b, up)?;
        let objective = PiObjective {
            advantages: &er.advantages,
            pi_k: &pi,
            pi_b,
            tau: up.tau,
            beta,
        };
        let ascent_tv_gap = if options.ascent {
            let weights = state_weights(mdp, &pi, options.weighting)?;
            ascent_gap(&objective, &pi_next, &weights, options.ascent_random_starts, &mut rng)?
        } else {
            0.0
        };
        let dominance = if options.dominance_candidates > 0 {
            Some(dominance_margin(
                &objective,
                &pi_next,
                mdp,
                options.dominance_candidates,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut vu = v_from_returns(&er, &pi_next, mdp, pi_b, up)?;
        if options.corrupt_v_at == Some(k) {
            for s in mdp.non_terminal_states() {
                vu.v.set(s, vu.v.get(s) + 1e-3);
            }
        }
        let spread = vu.action_spread.iter().copied().fold(0.0, f64::max);

        q = q_next;
        pi = pi_next;
        v = vu.v;
        records.push(IterationRecord {
            k: k + 1,
            discrepancy: non_terminal_gap(&q_from_pi_v(&pi, &v, pi_b, up.tau)?, &q, mdp),
            residual: non_terminal_gap(&q, &q_star, mdp),
            ascent_tv_gap,
            dominance_margin: dominance,
            action_spread: spread,
        });
    }

    let gamma = mdp.gamma();
    let rho = gamma * (1.0 - up.lambda) / (1.0 - up.lambda * gamma);
    let envelope_modulus = 1.0 - up.alpha + up.alpha * rho;
    let envelope_holds = records
        .windows(2)
        .all(|w| w[1].residual <= envelope_modulus * w[0].residual + ENVELOPE_SLACK);
    let first_bad_iteration = records.iter().find(|r| {
        !(r.discrepancy <= DISCREPANCY_TOL)
            || !(r.ascent_tv_gap <= ASCENT_TV_TOL)
            || !(r.action_spread <= SPREAD_TOL)
            || r.dominance_margin.is_some_and(|m| !(m > 0.0))
    });
    let first_bad_iteration = first_bad_iteration.map(|r| r.k);
    Ok(EquivalenceReport {
        descriptor: descriptor.to_string(),
        tau: up.tau,
        gamma,
        lambda: up.lambda,
        alpha: up.alpha,
        beta,
        iterations: options.iterations,
        records,
        envelope_modulus,
        envelope_holds,
        passed: first_bad_iteration.is_none(),
        first_bad_iteration,
    })
}
