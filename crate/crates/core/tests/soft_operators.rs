use klq_core::envs::{build_bandit, build_random_mdp, build_target_string_task, RandomMdpSpec};
use klq_core::mdp::rollout_episode;
use klq_core::prefix_tree::{PrefixTree, DEFAULT_STATE_BUDGET};
use klq_core::rng::{derive_seed, seeded};
use klq_core::soft::{
    boltzmann, exact_soft_q, improvement_condition_holds, kl_augmented_return, lambda_bellman_apply, q_from_pi_v,
    soft_backward_induction, soft_bellman_apply, soft_q_backward_induction, soft_q_linear_solve, soft_value_iteration,
    solve_soft_optimal, SoftRlParams,
};
use klq_core::tables::{PolicyTable, QTable, VTable};
use klq_core::verify::{random_policy, random_q};
use proptest::prelude::*;

fn random_setup(seed: u64, terminal: usize) -> (klq_core::FiniteMdp, PolicyTable, PolicyTable, f64) {
    let mut rng = seeded(seed);
    let mut spec = RandomMdpSpec::new(5, 3, 0.9, derive_seed(seed, &[1]));
    spec.num_terminal = terminal;
    let mdp = build_random_mdp(&spec).unwrap();
    let pi_b = random_policy(5, 3, 1.0, &mut rng).unwrap();
    let pi = random_policy(5, 3, 2.0, &mut rng).unwrap();
    (mdp, pi_b, pi, 0.3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_bellman_contracts(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let (mdp, pi_b, pi, tau) = random_setup(seed, (seed % 2) as usize);
        let params = SoftRlParams::new(tau, mdp.gamma()).unwrap();
        let mut rng = seeded(derive_seed(seed, &[9]));
        let q1 = random_q(5, 3, scale, &mut rng);
        let q2 = random_q(5, 3, scale, &mut rng);
        let b1 = soft_bellman_apply(&q1, &pi, &mdp, &pi_b, params).unwrap();
        let b2 = soft_bellman_apply(&q2, &pi, &mdp, &pi_b, params).unwrap();
        prop_assert!(b1.sup_dist(&b2) <= mdp.gamma() * q1.sup_dist(&q2) + 1e-12);
    }

    #[test]
    fn lambda_bellman_contracts(seed in any::<u64>(), lambda in 0.0f64..0.99) {
        let (mdp, pi_b, pi, tau) = random_setup(seed, 0);
        let params = SoftRlParams::new(tau, mdp.gamma()).unwrap();
        let mut rng = seeded(derive_seed(seed, &[9]));
        let q1 = random_q(5, 3, 3.0, &mut rng);
        let q2 = random_q(5, 3, 3.0, &mut rng);
        let g = mdp.gamma();
        let modulus = g * (1.0 - lambda) / (1.0 - lambda * g);
        let b1 = lambda_bellman_apply(&q1, &pi, &mdp, &pi_b, params, lambda).unwrap();
        let b2 = lambda_bellman_apply(&q2, &pi, &mdp, &pi_b, params, lambda).unwrap();
        prop_assert!(b1.sup_dist(&b2) <= modulus * q1.sup_dist(&q2) + 1e-12);
    }

    #[test]
    fn boltzmann_roundtrip(seed in any::<u64>(), log_ratio in -1.0f64..4.0, tau in 0.01f64..5.0) {
        let mut rng = seeded(seed);
        let pi_b = random_policy(3, 4, 1.0, &mut rng).unwrap();
        let q = random_q(3, 4, 10f64.powf(log_ratio) * tau, &mut rng);
        let (pi, v) = boltzmann(&q, &pi_b, tau).unwrap();
        let back = q_from_pi_v(&pi, &v, &pi_b, tau).unwrap();
        prop_assert!(back.sup_dist(&q) <= 1e-10);
    }

    #[test]
    fn boltzmann_shift_equivariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = seeded(seed);
        let pi_b = random_policy(2, 3, 1.0, &mut rng).unwrap();
        let q = random_q(2, 3, 2.0, &mut rng);
        let shifted = QTable::from_values(2, 3, q.values().iter().map(|x| x + shift).collect()).unwrap();
        let (p1, v1) = boltzmann(&q, &pi_b, 0.5).unwrap();
        let (p2, v2) = boltzmann(&shifted, &pi_b, 0.5).unwrap();
        for s in 0..2 {
            prop_assert!(p1.tv_at(&p2, s) < 1e-12);
            prop_assert!((v2.get(s) - v1.get(s) - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_evaluation_is_fixed_point(seed in any::<u64>(), lambda in 0.0f64..0.95) {
        let (mdp, pi_b, pi, tau) = random_setup(seed, (seed % 3) as usize);
        let params = SoftRlParams::new(tau, mdp.gamma()).unwrap();
        let q = exact_soft_q(&pi, &mdp, &pi_b, params).unwrap();
        let b = soft_bellman_apply(&q, &pi, &mdp, &pi_b, params).unwrap();
        prop_assert!(b.sup_dist(&q) <= 1e-10);
        let l = lambda_bellman_apply(&q, &pi, &mdp, &pi_b, params, lambda).unwrap();
        prop_assert!(l.sup_dist(&q) <= 1e-10);
    }

    #[test]
    fn boltzmann_update_improves(seed in any::<u64>()) {
        let (mdp, pi_b, pi, tau) = random_setup(seed, (seed % 2) as usize);
        let params = SoftRlParams::new(tau, mdp.gamma()).unwrap();
        let q = exact_soft_q(&pi, &mdp, &pi_b, params).unwrap();
        let (better, _) = boltzmann(&q, &pi_b, tau).unwrap();
        let q_better = exact_soft_q(&better, &mdp, &pi_b, params).unwrap();
        for (a, b) in q_better.values().iter().zip(q.values()) {
            prop_assert!(*a >= b - 1e-9);
        }
    }
}

#[test]
fn improvement_condition_implies_improvement() {
    let mut checked = 0;
    for i in 0..20u64 {
        let (mdp, pi_b, pi, tau) = random_setup(derive_seed(77, &[i]), (i % 2) as usize);
        let params = SoftRlParams::new(tau, mdp.gamma()).unwrap();
        let q = exact_soft_q(&pi, &mdp, &pi_b, params).unwrap();
        let (target, _) = boltzmann(&q, &pi_b, tau).unwrap();
        let mut rng = seeded(i);
        for _ in 0..5 {
            let other = random_policy(5, 3, 2.0, &mut rng).unwrap();
            let mix = (i as f64 + 1.0) / 25.0;
            let probs = target
                .probs()
                .iter()
                .zip(other.probs())
                .map(|(a, b)| (1.0 - mix) * a + mix * b)
                .collect();
            let candidate = PolicyTable::from_probs(5, 3, probs).unwrap();
            let verdict = improvement_condition_holds(&candidate, &pi, &q, &pi_b, tau, &mdp).unwrap();
            if verdict.holds {
                checked += 1;
                let q_new = exact_soft_q(&candidate, &mdp, &pi_b, params).unwrap();
                for (a, b) in q_new.values().iter().zip(q.values()) {
                    assert!(*a >= b - 1e-9);
                }
            }
        }
    }
    assert!(checked > 20, "only {checked} candidates met the condition");
}

#[test]
fn improvement_condition_trivial_cases() {
    let (mdp, pi_b, pi, tau) = random_setup(3, 1);
    let params = SoftRlParams::new(tau, mdp.gamma()).unwrap();
    let q = exact_soft_q(&pi, &mdp, &pi_b, params).unwrap();
    let (target, _) = boltzmann(&q, &pi_b, tau).unwrap();
    assert!(
        improvement_condition_holds(&target, &pi, &q, &pi_b, tau, &mdp)
            .unwrap()
            .holds
    );
    let same = improvement_condition_holds(&pi, &pi, &q, &pi_b, tau, &mdp).unwrap();
    assert!(same.holds);
    assert!(same.margins.iter().all(|m| *m == 0.0));
}

#[test]
fn bandit_closed_form() {
    let mdp = build_bandit(&[1.0, 0.0]).unwrap();
    let pi_b = PolicyTable::uniform(2, 2);
    let params = SoftRlParams::new(1.0, 1.0).unwrap();
    let opt = solve_soft_optimal(&mdp, &pi_b, params).unwrap();
    let e = std::f64::consts::E;
    assert!((opt.policy.prob(0, 0) - e / (e + 1.0)).abs() < 1e-12);
    assert!((opt.v.get(0) - ((e + 1.0) / 2.0).ln()).abs() < 1e-12);

    let flat = solve_soft_optimal(&mdp, &pi_b, SoftRlParams::new(1e6, 1.0).unwrap()).unwrap();
    assert!(flat.policy.tv_at(&pi_b, 0) < 1e-5);
}

#[test]
fn self_loop_geometric_series() {
    let mdp = klq_core::FiniteMdp::new(
        1,
        1,
        vec![vec![klq_core::Outcome {
            next: 0,
            prob: 1.0,
            reward: 1.0,
        }]],
        vec![false],
        0.9,
        vec![1.0],
    )
    .unwrap();
    let pi = PolicyTable::uniform(1, 1);
    let q = exact_soft_q(&pi, &mdp, &pi, SoftRlParams::new(0.5, 0.9).unwrap()).unwrap();
    assert!((q.get(0, 0) - 10.0).abs() < 1e-12);
}

#[test]
fn zero_discount_is_expected_reward() {
    let spec = RandomMdpSpec::new(4, 3, 0.0, 5);
    let mdp = build_random_mdp(&spec).unwrap();
    let mut rng = seeded(5);
    let pi_b = random_policy(4, 3, 1.0, &mut rng).unwrap();
    let pi = random_policy(4, 3, 1.0, &mut rng).unwrap();
    let q = exact_soft_q(&pi, &mdp, &pi_b, SoftRlParams::new(0.3, 0.0).unwrap()).unwrap();
    for s in 0..4 {
        for a in 0..3 {
            assert!((q.get(s, a) - mdp.expected_reward(s, a)).abs() < 1e-14);
        }
    }
}

#[test]
fn inverse_boltzmann_example() {
    let pi = PolicyTable::from_probs(1, 2, vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
    let pi_b = PolicyTable::uniform(1, 2);
    let v = VTable::from_values(vec![1.5f64.ln()]).unwrap();
    let q = q_from_pi_v(&pi, &v, &pi_b, 1.0).unwrap();
    assert!((q.get(0, 0) - 2f64.ln()).abs() < 1e-12);
    assert!(q.get(0, 1).abs() < 1e-12);
    let same = q_from_pi_v(&pi_b, &v, &pi_b, 1.0).unwrap();
    assert_eq!(same.row(0), &[v.get(0), v.get(0)]);
}

#[test]
fn episodic_solvers_agree() {
    let (spec, rm) = build_target_string_task(3, vec![0, 1], vec![vec![0], vec![1]], 4, 0.5, 1.0).unwrap();
    let tree = PrefixTree::build(&spec, &rm, &[0, 1], 1.0, DEFAULT_STATE_BUDGET).unwrap();
    let mdp = tree.mdp();
    let mut rng = seeded(11);
    let pi_b = random_policy(mdp.num_states(), 3, 1.0, &mut rng).unwrap();
    let pi = random_policy(mdp.num_states(), 3, 1.0, &mut rng).unwrap();
    let params = SoftRlParams::new(0.2, 1.0).unwrap();
    let by_induction = soft_backward_induction(mdp, &pi_b, params).unwrap();
    let by_iteration = soft_value_iteration(mdp, &pi_b, params, 1e-12, 10_000).unwrap();
    assert!(by_induction.q.sup_dist(&by_iteration.q) < 1e-8);

    let discounted = mdp.with_gamma(0.95).unwrap();
    let params = SoftRlParams::new(0.2, 0.95).unwrap();
    let a = soft_q_backward_induction(&pi, &discounted, &pi_b, params).unwrap();
    let b = soft_q_linear_solve(&pi, &discounted, &pi_b, params).unwrap();
    assert!(a.sup_dist(&b) < 1e-10);
}

/// Monte-Carlo estimate of `Q^π(s,a)` from KL-augmented returns, checked
/// against the exact solution at three standard errors.
#[test]
fn monte_carlo_returns_match_exact_evaluation() {
    let mut spec = RandomMdpSpec::new(6, 2, 0.9, 21);
    spec.num_terminal = 2;
    let mdp = build_random_mdp(&spec).unwrap();
    let mut rng = seeded(21);
    let pi_b = random_policy(6, 2, 1.0, &mut rng).unwrap();
    let pi = random_policy(6, 2, 1.0, &mut rng).unwrap();
    let params = SoftRlParams::new(0.5, 0.9).unwrap();
    let q = exact_soft_q(&pi, &mdp, &pi_b, params).unwrap();
    let n = 100_000;
    for s in mdp.non_terminal_states().take(2) {
        for a in 0..2 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut rng = seeded(derive_seed(21, &[s as u64, a as u64]));
            for _ in 0..n {
                let traj = rollout_episode(&mdp, &pi, s, Some(a), &mut rng, 300).unwrap();
                let g = kl_augmented_return(&traj, &pi, &pi_b, params, 0).unwrap();
                sum += g;
                sq += g * g;
            }
            let mean = sum / n as f64;
            let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(
                (mean - q.get(s, a)).abs() <= 3.0 * se,
                "({s},{a}): mean {mean} exact {} se {se}",
                q.get(s, a)
            );
        }
    }
}
