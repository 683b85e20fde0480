//! Executable property suites with fixed seeds.
//!
//! Each property reports a margin: the tolerance minus the worst measured
//! violation, so a non-negative margin means the property held.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::envs::{build_random_mdp, RandomMdpSpec};
use crate::error::{Error, Result};
use crate::estimators::{
    adjusted_rewards, gae_advantages, gae_deltas, lambda_targets, td_errors, LambdaParams, TdMode,
};
use crate::learners::{klq_loss_and_grad, ppo_clip_loss_and_grad, Gradient, ParamState, StepRecord};
use crate::mdp::{rollout_episode, FiniteMdp};
use crate::rng::{derive_seed, seeded};
use crate::soft::{
    boltzmann, exact_soft_q, improvement_condition_holds, lambda_bellman_apply, q_from_pi_v, soft_bellman_apply,
    SoftRlParams,
};
use crate::tables::{PolicyTable, QTable, VTable};

/// Result of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyOutcome {
    pub name: String,
    pub passed: bool,
    /// Tolerance minus the worst observed violation.
    pub margin: f64,
    pub detail: String,
}

impl fmt::Display for PropertyOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {} (margin {:.3e}): {}",
            self.name, self.margin, self.detail
        )
    }
}

/// Named property suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    SoftOperators,
    Estimators,
    Gradients,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft-operators" | "appendix-a" => Ok(Suite::SoftOperators),
            "estimators" => Ok(Suite::Estimators),
            "gradients" => Ok(Suite::Gradients),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::SoftOperators => "soft-operators",
            Suite::Estimators => "estimators",
            Suite::Gradients => "gradients",
            Suite::All => "all",
        })
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<PropertyOutcome>> {
    match suite {
        Suite::SoftOperators => soft_operator_suite(seed, 20, 100),
        Suite::Estimators => estimator_suite(seed, 10, 5),
        Suite::Gradients => gradient_suite(seed, 100),
        Suite::All => {
            let mut out = soft_operator_suite(seed, 20, 100)?;
            out.extend(estimator_suite(seed, 10, 5)?);
            out.extend(gradient_suite(seed, 100)?);
            Ok(out)
        }
    }
}

/// Tracks the worst violation of `measured ≤ bound` over many trials.
struct Worst {
    margin: f64,
    trials: usize,
    failures: usize,
}

impl Worst {
    fn new() -> Self {
        Self {
            margin: f64::INFINITY,
            trials: 0,
            failures: 0,
        }
    }

    fn check(&mut self, measured: f64, bound: f64) {
        let m = bound - measured;
        self.trials += 1;
        if !(m >= 0.0) {
            self.failures += 1;
        }
        if !(m >= self.margin) {
            self.margin = m;
        }
    }

    fn finish(self, name: &str, what: &str) -> PropertyOutcome {
        PropertyOutcome {
            name: name.to_string(),
            passed: self.failures == 0 && self.trials > 0,
            margin: self.margin,
            detail: format!("{}/{} {what}", self.trials - self.failures, self.trials),
        }
    }
}

/// Random full-support policy with logits uniform in `[−spread, spread]`.
pub fn random_policy(num_states: usize, num_actions: usize, spread: f64, rng: &mut ChaCha8Rng) -> Result<PolicyTable> {
    let logits: Vec<f64> = (0..num_states * num_actions)
        .map(|_| rng.random_range(-spread..=spread))
        .collect();
    PolicyTable::from_logits(num_states, num_actions, &logits)
}

pub fn random_q(num_states: usize, num_actions: usize, scale: f64, rng: &mut ChaCha8Rng) -> QTable {
    let values = (0..num_states * num_actions)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    QTable::from_values(num_states, num_actions, values).expect("finite values")
}

fn random_v(num_states: usize, scale: f64, rng: &mut ChaCha8Rng) -> VTable {
    VTable::from_values((0..num_states).map(|_| rng.random_range(-scale..=scale)).collect()).expect("finite values")
}

/// Random MDP of the acceptance grid: 2–6 states, 2–4 actions,
/// `γ ∈ {0.5, 0.9, 0.99}`, occasionally with a terminal state.
pub fn random_test_mdp(seed: u64) -> Result<FiniteMdp> {
    let mut rng = seeded(seed);
    let gammas = [0.5, 0.9, 0.99];
    let mut spec = RandomMdpSpec::new(
        rng.random_range(2..=6),
        rng.random_range(2..=4),
        gammas[rng.random_range(0..gammas.len())],
        derive_seed(seed, &[1]),
    );
    if spec.num_states > 2 && rng.random_bool(0.3) {
        spec.num_terminal = 1;
    }
    spec.sparsity = if rng.random_bool(0.5) { 0.0 } else { 0.4 };
    build_random_mdp(&spec)
}

/// Contraction, fixed points, Boltzmann roundtrip and improvement checks.
pub fn soft_operator_suite(seed: u64, num_mdps: usize, pairs_per_mdp: usize) -> Result<Vec<PropertyOutcome>> {
    let lambdas = [0.0, 0.5, 0.9];
    let mut contraction = Worst::new();
    let mut lambda_contraction = Worst::new();
    let mut fixed = Worst::new();
    let mut lambda_fixed = Worst::new();
    let mut roundtrip = Worst::new();
    let mut shift = Worst::new();
    let mut corollary = Worst::new();
    let mut theorem = Worst::new();
    let mut verdicts_true = 0;
    for i in 0..num_mdps {
        let mdp_seed = derive_seed(seed, &[10, i as u64]);
        let mdp = random_test_mdp(mdp_seed)?;
        let (ns, na, gamma) = (mdp.num_states(), mdp.num_actions(), mdp.gamma());
        let mut rng = seeded(derive_seed(mdp_seed, &[2]));
        let tau = rng.random_range(0.05..2.0);
        let params = SoftRlParams::new(tau, gamma)?;
        let pi_b = random_policy(ns, na, 1.0, &mut rng)?;
        let pi = random_policy(ns, na, 2.0, &mut rng)?;

        for p in 0..pairs_per_mdp {
            let scale = 10f64.powf(rng.random_range(-1.0..1.0));
            let q1 = random_q(ns, na, scale, &mut rng);
            let q2 = random_q(ns, na, scale, &mut rng);
            let d = q1.sup_dist(&q2);
            let b1 = soft_bellman_apply(&q1, &pi, &mdp, &pi_b, params)?;
            let b2 = soft_bellman_apply(&q2, &pi, &mdp, &pi_b, params)?;
            contraction.check(b1.sup_dist(&b2), gamma * d + 1e-12);
            let lambda = lambdas[p % lambdas.len()];
            let modulus = gamma * (1.0 - lambda) / (1.0 - lambda * gamma);
            let l1 = lambda_bellman_apply(&q1, &pi, &mdp, &pi_b, params, lambda)?;
            let l2 = lambda_bellman_apply(&q2, &pi, &mdp, &pi_b, params, lambda)?;
            lambda_contraction.check(l1.sup_dist(&l2), modulus * d + 1e-12);
        }

        let q_pi = exact_soft_q(&pi, &mdp, &pi_b, params)?;
        let residual = soft_bellman_apply(&q_pi, &pi, &mdp, &pi_b, params)?.sup_dist(&q_pi);
        fixed.check(residual, 1e-10);
        for &lambda in &lambdas {
            let lq = lambda_bellman_apply(&q_pi, &pi, &mdp, &pi_b, params, lambda)?;
            lambda_fixed.check(lq.sup_dist(&q_pi), 1e-10);
        }

        for k in 0..5 {
            let ratio = [1.0, 10.0, 1e2, 1e3, 1e4][k];
            let q = random_q(ns, na, ratio * tau, &mut rng);
            let (bp, bv) = boltzmann(&q, &pi_b, tau)?;
            let back = q_from_pi_v(&bp, &bv, &pi_b, tau)?;
            roundtrip.check(back.sup_dist(&q), 1e-10);
            let c: Vec<f64> = (0..ns).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut shifted = q.clone();
            for s in 0..ns {
                for x in shifted.row_mut(s) {
                    *x += c[s];
                }
            }
            let (sp, sv) = boltzmann(&shifted, &pi_b, tau)?;
            let mut gap: f64 = 0.0;
            for s in 0..ns {
                gap = gap.max((sv.get(s) - bv.get(s) - c[s]).abs());
                for a in 0..na {
                    gap = gap.max((sp.prob(s, a) - bp.prob(s, a)).abs());
                }
            }
            shift.check(gap, 1e-9 * (1.0 + ratio * tau));
        }

        let (pi_improved, _) = boltzmann(&q_pi, &pi_b, tau)?;
        let q_improved = exact_soft_q(&pi_improved, &mdp, &pi_b, params)?;
        let deficit = mdp
            .non_terminal_states()
            .flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| q_pi.get(s, a) - q_improved.get(s, a))
            .fold(f64::NEG_INFINITY, f64::max);
        corollary.check(deficit, 1e-9);

        for _ in 0..10 {
            let mix: f64 = rng.random_range(0.0..1.0);
            let other = random_policy(ns, na, 2.0, &mut rng)?;
            let probs: Vec<f64> = pi_improved
                .probs()
                .iter()
                .zip(other.probs())
                .map(|(x, y)| (1.0 - mix) * x + mix * y)
                .collect();
            let pi_new = PolicyTable::from_probs(ns, na, probs)?;
            let verdict = improvement_condition_holds(&pi_new, &pi, &q_pi, &pi_b, tau, &mdp)?;
            if verdict.holds {
                verdicts_true += 1;
                let q_new = exact_soft_q(&pi_new, &mdp, &pi_b, params)?;
                let deficit = mdp
                    .non_terminal_states()
                    .flat_map(|s| (0..na).map(move |a| (s, a)))
                    .map(|(s, a)| q_pi.get(s, a) - q_new.get(s, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                theorem.check(deficit, 1e-9);
            }
        }
    }
    let mut theorem_outcome = theorem.finish("improvement-theorem", "policies meeting the condition improved");
    if verdicts_true == 0 {
        theorem_outcome.detail = "no candidate met the improvement condition".into();
    }
    Ok(vec![
        contraction.finish("soft-bellman-contraction", "pairs within gamma modulus"),
        lambda_contraction.finish("lambda-bellman-contraction", "pairs within lambda modulus"),
        fixed.finish("soft-bellman-fixed-point", "exact evaluations with residual <= 1e-10"),
        lambda_fixed.finish(
            "lambda-bellman-fixed-point",
            "lambda backups fixing the exact evaluation",
        ),
        roundtrip.finish("boltzmann-roundtrip", "tables recovered within 1e-10"),
        shift.finish("boltzmann-shift-equivariance", "shifted tables with equal policy"),
        corollary.finish("boltzmann-improvement", "Boltzmann updates without loss"),
        theorem_outcome,
    ])
}

/// TD cross-form equality, the GAE/KLQ delta identity and `Â = Ĝ − Q` at
/// `α = 1`.
pub fn estimator_suite(seed: u64, num_mdps: usize, trajs_per_mdp: usize) -> Result<Vec<PropertyOutcome>> {
    let mut td_forms = Worst::new();
    let mut delta_identity = Worst::new();
    let mut advantage_identity = Worst::new();
    for i in 0..num_mdps {
        let mdp_seed = derive_seed(seed, &[20, i as u64]);
        let mdp = random_test_mdp(mdp_seed)?;
        let (ns, na, gamma) = (mdp.num_states(), mdp.num_actions(), mdp.gamma());
        let mut rng = seeded(derive_seed(mdp_seed, &[3]));
        let tau = rng.random_range(0.05..2.0);
        let params = SoftRlParams::new(tau, gamma)?;
        let pi_b = random_policy(ns, na, 1.0, &mut rng)?;
        let pi = random_policy(ns, na, 2.0, &mut rng)?;
        let v = random_v(ns, 3.0, &mut rng);
        let lambda = rng.random_range(0.0..1.0);
        let lp = LambdaParams::new(lambda, 1.0, gamma)?;
        for _ in 0..trajs_per_mdp {
            let start = rng.random_range(0..ns);
            let cap = rng.random_range(1..=30);
            let traj = rollout_episode(&mdp, &pi, start, None, &mut rng, cap)?;
            let short = td_errors(&traj, &pi, &v, &pi_b, params, TdMode::Decomposed)?;
            let long = td_errors(&traj, &pi, &v, &pi_b, params, TdMode::Expected)?;
            let gap = short.iter().zip(&long).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            td_forms.check(gap, 1e-10);

            let adjusted = adjusted_rewards(&traj, &pi, &pi_b, tau)?;
            let gae_d = gae_deltas(&traj, &v, &adjusted, gamma)?;
            let gap = gae_d.iter().zip(&short).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            delta_identity.check(gap, 1e-10);

            let adv = gae_advantages(&traj, &v, &adjusted, gamma, lambda)?;
            let lt = lambda_targets(&traj, &pi, &v, &pi_b, lp, tau)?;
            let gap = adv
                .iter()
                .zip(lt.targets.iter().zip(&lt.q_taken))
                .fold(0.0f64, |m, (a, (g, q))| m.max((a - (g - q)).abs()));
            advantage_identity.check(gap, 1e-10);
        }
    }
    Ok(vec![
        td_forms.finish("td-form-equality", "trajectories with matching TD forms"),
        delta_identity.finish("gae-klq-delta-identity", "trajectories with matching deltas"),
        advantage_identity.finish("gae-advantage-identity", "trajectories with A = G - Q"),
    ])
}

/// Random parameters and minibatch for gradient checks.
pub fn random_minibatch(seed: u64) -> Result<(ParamState, Vec<StepRecord>)> {
    let mut rng = seeded(seed);
    let ns = rng.random_range(1..=4);
    let na = rng.random_range(2..=4);
    let logits = (0..ns * na).map(|_| rng.random_range(-1.5..1.5)).collect();
    let values = (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = ParamState::new(ns, na, logits, values)?;
    let pi_b = random_policy(ns, na, 1.0, &mut rng)?;
    let pi_old = random_policy(ns, na, 1.5, &mut rng)?;
    let n = rng.random_range(1..=12);
    let steps = (0..n)
        .map(|_| {
            let state = rng.random_range(0..ns);
            let action = rng.random_range(0..na);
            StepRecord {
                state,
                action,
                target: rng.random_range(-2.0..2.0),
                advantage: rng.random_range(-2.0..2.0),
                value_target: rng.random_range(-2.0..2.0),
                old_log_prob: pi_old.log_prob(state, action),
                old_value: rng.random_range(-1.0..1.0),
                ref_log_prob: pi_b.log_prob(state, action),
            }
        })
        .collect();
    Ok((params, steps))
}

fn directional(grad: &Gradient, dir: &Gradient) -> f64 {
    grad.logits.iter().zip(&dir.logits).map(|(g, d)| g * d).sum::<f64>()
        + grad.values.iter().zip(&dir.values).map(|(g, d)| g * d).sum::<f64>()
}

fn shifted(params: &ParamState, dir: &Gradient, h: f64) -> ParamState {
    let mut p = params.clone();
    for (x, d) in p.logits.iter_mut().zip(&dir.logits) {
        *x += h * d;
    }
    for (x, d) in p.values.iter_mut().zip(&dir.values) {
        *x += h * d;
    }
    p
}

/// Central-difference check of a loss gradient along a random direction.
/// Returns the relative error.
pub fn finite_difference_error<F>(params: &ParamState, grad: &Gradient, dir: &Gradient, h: f64, loss: F) -> Result<f64>
where
    F: Fn(&ParamState) -> Result<f64>,
{
    let fd = (loss(&shifted(params, dir, h))? - loss(&shifted(params, dir, -h))?) / (2.0 * h);
    let an = directional(grad, dir);
    Ok((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8))
}

fn random_direction(params: &ParamState, rng: &mut ChaCha8Rng) -> Gradient {
    Gradient {
        logits: params.logits.iter().map(|_| rng.random_range(-1.0..1.0)).collect(),
        values: params.values.iter().map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Distance of a PPO-clip minibatch from the loss's kinks; finite
/// differences are only meaningful when this is well above the step size.
pub fn clip_kink_distance(params: &ParamState, steps: &[StepRecord], clip_eps: f64, value_clip: f64) -> Result<f64> {
    let pi = params.policy()?;
    let mut dist = f64::INFINITY;
    for st in steps {
        let ratio = (pi.log_prob(st.state, st.action) - st.old_log_prob).exp();
        if st.advantage != 0.0 {
            dist = dist
                .min((ratio - (1.0 - clip_eps)).abs())
                .min((ratio - (1.0 + clip_eps)).abs());
        }
        let v = params.values[st.state];
        dist = dist
            .min((v - (st.old_value - value_clip)).abs())
            .min((v - (st.old_value + value_clip)).abs());
        let vc = v.clamp(st.old_value - value_clip, st.old_value + value_clip);
        if vc != v {
            dist = dist.min(((v - st.value_target).abs() - (vc - st.value_target).abs()).abs());
        }
    }
    Ok(dist)
}

pub const GRADIENT_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

/// Analytic against central finite-difference gradients for the KLQ and
/// PPO-clip losses, `checks` agreements each.
pub fn gradient_suite(seed: u64, checks: usize) -> Result<Vec<PropertyOutcome>> {
    let mut klq = Worst::new();
    let mut ppo = Worst::new();
    let mut excluded = 0;
    let (clip_eps, value_clip, value_coef) = (0.2, 0.2, 0.1);
    let mut i = 0u64;
    while klq.trials < checks || ppo.trials < checks {
        let (params, steps) = random_minibatch(derive_seed(seed, &[30, i]))?;
        let mut rng = seeded(derive_seed(seed, &[31, i]));
        i += 1;
        let dir = random_direction(&params, &mut rng);
        if klq.trials < checks {
            let tau = rng.random_range(0.05..1.0);
            let (_, grad) = klq_loss_and_grad(&params, &steps, tau)?;
            let err = finite_difference_error(&params, &grad, &dir, FD_STEP, |p| {
                klq_loss_and_grad(p, &steps, tau).map(|(l, _)| l)
            })?;
            klq.check(err, GRADIENT_REL_TOL);
        }
        if ppo.trials < checks {
            if clip_kink_distance(&params, &steps, clip_eps, value_clip)? < 1e-3 {
                excluded += 1;
                continue;
            }
            let (_, grad) = ppo_clip_loss_and_grad(&params, &steps, clip_eps, value_clip, value_coef)?;
            let err = finite_difference_error(&params, &grad, &dir, FD_STEP, |p| {
                ppo_clip_loss_and_grad(p, &steps, clip_eps, value_clip, value_coef).map(|(l, _)| l.total)
            })?;
            ppo.check(err, GRADIENT_REL_TOL);
        }
    }
    let mut ppo_outcome = ppo.finish("ppo-clip-gradient", "finite-difference agreements");
    ppo_outcome
        .detail
        .push_str(&format!(" ({excluded} draws near clip boundaries skipped)"));
    Ok(vec![
        klq.finish("klq-gradient", "finite-difference agreements"),
        ppo_outcome,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for name in ["soft-operators", "estimators", "gradients", "all"] {
            assert_eq!(name.parse::<Suite>().unwrap().to_string(), name);
        }
        assert_eq!("appendix-a".parse::<Suite>().unwrap(), Suite::SoftOperators);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn worst_tracks_failures() {
        let mut w = Worst::new();
        w.check(0.5, 1.0);
        w.check(2.0, 1.0);
        let out = w.finish("x", "ok");
        assert!(!out.passed);
        assert_eq!(out.margin, -1.0);
        assert_eq!(out.detail, "1/2 ok");
    }

    #[test]
    fn small_suites_pass() {
        for out in soft_operator_suite(7, 3, 10).unwrap() {
            assert!(out.passed, "{out}");
        }
        for out in estimator_suite(7, 2, 3).unwrap() {
            assert!(out.passed, "{out}");
        }
        for out in gradient_suite(7, 10).unwrap() {
            assert!(out.passed, "{out}");
        }
    }
}
