use klq_core::envs::{build_random_mdp, RandomMdpSpec};
use klq_core::equivalence::{
    beta_from_alpha, expected_returns, pi_space_maximizer, q_space_iterate, run_equivalence_check, v_space_minimizer,
    EquivalenceOptions, PiObjective, StateWeighting, UpdateParams, ASCENT_MAX_ITERATIONS,
};
use klq_core::rng::{derive_seed, seeded};
use klq_core::soft::{boltzmann, q_from_pi_v};
use klq_core::tables::QTable;
use klq_core::verify::{random_policy, random_q};
use proptest::prelude::*;
use rand::Rng;

fn setup(seed: u64, terminal: usize) -> (klq_core::FiniteMdp, klq_core::PolicyTable, QTable) {
    let mut spec = RandomMdpSpec::new(5, 3, 0.9, derive_seed(seed, &[1]));
    spec.num_terminal = terminal;
    let mdp = build_random_mdp(&spec).unwrap();
    let mut rng = seeded(seed);
    let pi_b = random_policy(5, 3, 1.0, &mut rng).unwrap();
    let q0 = random_q(5, 3, 2.0, &mut rng);
    (mdp, pi_b, q0)
}

#[test]
fn grid_passes() {
    for m in 0..5u64 {
        let (mdp, pi_b, q0) = setup(derive_seed(40, &[m]), (m % 2) as usize);
        for alpha in [0.25, 0.5, 1.0] {
            for lambda in [0.0, 0.5, 0.95] {
                let up = UpdateParams {
                    tau: 0.3,
                    lambda,
                    alpha,
                };
                let report =
                    run_equivalence_check(&mdp, &pi_b, up, &q0, &EquivalenceOptions::default(), "grid").unwrap();
                assert!(report.passed, "{}", report.to_text());
                assert_eq!(report.records.len(), 11);
                assert!(report.max_discrepancy() <= 1e-8);
                assert!(report.max_ascent_gap() <= 1e-6);
            }
        }
    }
}

#[test]
fn zero_iterations_pass_trivially() {
    let (mdp, pi_b, q0) = setup(1, 0);
    let options = EquivalenceOptions {
        iterations: 0,
        ..EquivalenceOptions::default()
    };
    let up = UpdateParams {
        tau: 0.3,
        lambda: 0.5,
        alpha: 0.5,
    };
    let report = run_equivalence_check(&mdp, &pi_b, up, &q0, &options, "k0").unwrap();
    assert!(report.passed);
    assert_eq!(report.records.len(), 1);
}

#[test]
fn corrupted_value_update_names_first_bad_iteration() {
    let (mdp, pi_b, q0) = setup(2, 1);
    let options = EquivalenceOptions {
        corrupt_v_at: Some(3),
        ..EquivalenceOptions::default()
    };
    let up = UpdateParams {
        tau: 0.3,
        lambda: 0.5,
        alpha: 1.0,
    };
    let report = run_equivalence_check(&mdp, &pi_b, up, &q0, &options, "corrupt").unwrap();
    assert!(!report.passed);
    assert_eq!(report.first_bad_iteration, Some(4));
    let text = report.to_text();
    assert!(text.contains("FAIL"));
}

#[test]
fn weightings_share_the_maximiser() {
    let (mdp, pi_b, q0) = setup(3, 1);
    let up = UpdateParams {
        tau: 0.3,
        lambda: 0.5,
        alpha: 0.5,
    };
    let mut reports = Vec::new();
    for weighting in [StateWeighting::Uniform, StateWeighting::Visitation] {
        let options = EquivalenceOptions {
            weighting,
            dominance_candidates: 20,
            ..EquivalenceOptions::default()
        };
        let report = run_equivalence_check(&mdp, &pi_b, up, &q0, &options, "w").unwrap();
        assert!(report.passed, "{}", report.to_text());
        reports.push(report);
    }
    for (a, b) in reports[0].records.iter().zip(&reports[1].records) {
        assert_eq!(a.discrepancy, b.discrepancy);
        assert_eq!(a.residual, b.residual);
    }
}

#[test]
fn report_csv_layout() {
    let (mdp, pi_b, q0) = setup(4, 0);
    let options = EquivalenceOptions {
        iterations: 3,
        ..EquivalenceOptions::default()
    };
    let up = UpdateParams {
        tau: 0.3,
        lambda: 0.0,
        alpha: 1.0,
    };
    let report = run_equivalence_check(&mdp, &pi_b, up, &q0, &options, "csv").unwrap();
    let mut out = Vec::new();
    report.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("k,discrepancy,residual,ascent_tv_gap,dominance_margin,action_spread")
    );
    assert_eq!(lines.count(), 4);
}

#[test]
fn beta_map() {
    assert_eq!(beta_from_alpha(1.0, 0.3).unwrap(), 0.0);
    assert!((beta_from_alpha(0.25, 0.3).unwrap() - 0.9).abs() < 1e-15);
    assert!(beta_from_alpha(1.5, 0.3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// One step of each sequence from the same Boltzmann-consistent start
    /// lands on the same action-values.
    #[test]
    fn single_step_agreement(seed in any::<u64>(), alpha in 0.05f64..=1.0, lambda in 0.0f64..0.97) {
        let (mdp, pi_b, q0) = setup(seed, (seed % 2) as usize);
        let mut q0 = q0;
        q0.zero_rows(mdp.terminal_flags());
        let up = UpdateParams { tau: 0.4, lambda, alpha };
        let (pi, v) = boltzmann(&q0, &pi_b, up.tau).unwrap();
        let q1 = q_space_iterate(&q0, &mdp, &pi_b, up).unwrap();
        let pi1 = pi_space_maximizer(&pi, &v, &mdp, &pi_b, up).unwrap();
        let v1 = v_space_minimizer(&pi, &v, &pi1, &mdp, &pi_b, up).unwrap();
        let rebuilt = q_from_pi_v(&pi1, &v1.v, &pi_b, up.tau).unwrap();
        for s in mdp.non_terminal_states() {
            for a in 0..3 {
                prop_assert!((rebuilt.get(s, a) - q1.get(s, a)).abs() <= 1e-8);
            }
        }
    }

    /// Newton ascent from random logits reaches the closed form.
    #[test]
    fn ascent_reaches_closed_form(seed in any::<u64>(), alpha in 0.05f64..=1.0) {
        let (mdp, pi_b, q0) = setup(seed, 0);
        let up = UpdateParams { tau: 0.05, lambda: 0.5, alpha };
        let (pi, v) = boltzmann(&q0, &pi_b, up.tau).unwrap();
        let er = expected_returns(&pi, &v, &mdp, &pi_b, up).unwrap();
        let objective = PiObjective {
            advantages: &er.advantages,
            pi_k: &pi,
            pi_b: &pi_b,
            tau: up.tau,
            beta: beta_from_alpha(alpha, up.tau).unwrap(),
        };
        let mut rng = seeded(seed);
        for s in 0..5 {
            let closed = objective.closed_form_row(s);
            let start: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
            let out = objective.ascend(s, &start, ASCENT_MAX_ITERATIONS);
            let tv: f64 = 0.5 * out.log_probs.iter().zip(&closed).map(|(a, b)| (a.exp() - b.exp()).abs()).sum::<f64>();
            prop_assert!(tv <= 1e-6, "state {s}: tv {tv}");
            prop_assert!(objective.value_at(s, &closed) >= out.objective - 1e-12);
        }
    }
}
