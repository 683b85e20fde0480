//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use klq_core::envs::{build_bandit, build_random_mdp, build_target_string_task, RandomMdpSpec};
use klq_core::learners::{train, Algo, TrainConfig};
use klq_core::mdp::rollout_episode;
use klq_core::prefix_tree::{PrefixTree, DEFAULT_STATE_BUDGET};
use klq_core::rng::{derive_seed, seeded};
use klq_core::soft::{exact_soft_q, kl_augmented_return, optimal_objective, policy_objective, SoftRlParams};
use klq_core::verify::{estimator_suite, gradient_suite, random_policy, soft_operator_suite, PropertyOutcome};
use klq_core::{FiniteMdp, PolicyTable};
use tempfile::TempDir;

const SEED: u64 = 2024;

struct Verdict {
    passed: bool,
    detail: String,
}

fn from_outcomes(outcomes: &[PropertyOutcome], names: &[&str]) -> Verdict {
    let picked: Vec<_> = outcomes.iter().filter(|o| names.contains(&o.name.as_str())).collect();
    assert_eq!(picked.len(), names.len(), "missing properties {names:?}");
    Verdict {
        passed: picked.iter().all(|o| o.passed),
        detail: picked.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("; "),
    }
}

fn within(v: Verdict, elapsed: Duration, budget: Duration) -> Verdict {
    Verdict {
        passed: v.passed && elapsed < budget,
        detail: format!("{} [{:.1}s of {}s]", v.detail, elapsed.as_secs_f64(), budget.as_secs()),
    }
}

fn contraction() -> Verdict {
    let start = Instant::now();
    let outcomes = soft_operator_suite(SEED, 20, 100).unwrap();
    let v = from_outcomes(&outcomes, &["soft-bellman-contraction", "lambda-bellman-contraction"]);
    within(v, start.elapsed(), Duration::from_secs(30))
}

/// Monte-Carlo KL-augmented returns against the exact evaluation at 3σ.
fn monte_carlo(mdp: &FiniteMdp, pi: &PolicyTable, pi_b: &PolicyTable, params: SoftRlParams, n: usize) -> (bool, f64) {
    let q = exact_soft_q(pi, mdp, pi_b, params).unwrap();
    let mut worst: f64 = 0.0;
    for s in mdp.non_terminal_states().take(2) {
        for a in 0..mdp.num_actions() {
            let mut rng = seeded(derive_seed(SEED, &[s as u64, a as u64]));
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..n {
                let traj = rollout_episode(mdp, pi, s, Some(a), &mut rng, 400).unwrap();
                let g = kl_augmented_return(&traj, pi, pi_b, params, 0).unwrap();
                sum += g;
                sq += g * g;
            }
            let mean = sum / n as f64;
            let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
            worst = worst.max((mean - q.get(s, a)).abs() / se);
        }
    }
    (worst <= 3.0, worst)
}

fn fixed_point() -> Verdict {
    let start = Instant::now();
    let outcomes = soft_operator_suite(SEED, 20, 100).unwrap();
    let exact = from_outcomes(&outcomes, &["soft-bellman-fixed-point", "lambda-bellman-fixed-point"]);
    let spec = RandomMdpSpec {
        num_terminal: 1,
        ..RandomMdpSpec::new(5, 2, 0.9, derive_seed(SEED, &[2]))
    };
    let mdp = build_random_mdp(&spec).unwrap();
    let mut rng = seeded(derive_seed(SEED, &[3]));
    let pi_b = random_policy(5, 2, 1.0, &mut rng).unwrap();
    let pi = random_policy(5, 2, 1.0, &mut rng).unwrap();
    let (mc_ok, worst) = monte_carlo(&mdp, &pi, &pi_b, SoftRlParams::new(0.5, 0.9).unwrap(), 100_000);
    let v = Verdict {
        passed: exact.passed && mc_ok,
        detail: format!(
            "{}; monte-carlo worst |mean - Q| = {worst:.2} standard errors",
            exact.detail
        ),
    };
    within(v, start.elapsed(), Duration::from_secs(120))
}

fn roundtrip() -> Verdict {
    let outcomes = soft_operator_suite(SEED, 20, 100).unwrap();
    from_outcomes(&outcomes, &["boltzmann-roundtrip"])
}

fn td_forms() -> Verdict {
    let outcomes = estimator_suite(SEED, 10, 5).unwrap();
    from_outcomes(&outcomes, &["td-form-equality"])
}

fn estimator_identity() -> Verdict {
    let outcomes = estimator_suite(SEED, 10, 5).unwrap();
    from_outcomes(&outcomes, &["gae-klq-delta-identity", "gae-advantage-identity"])
}

fn klq() -> &'static str {
    env!("CARGO_BIN_EXE_klq")
}

fn equivalence_grid() -> Verdict {
    let start = Instant::now();
    let tmp = TempDir::new().unwrap();
    let out = Command::new(klq())
        .args(["equivalence", "--quiet", "--seed", &SEED.to_string(), "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    let summary = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let mut cells = 0;
    let (mut gap, mut tv): (f64, f64) = (0.0, 0.0);
    let mut all_passed = true;
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        cells += 1;
        all_passed &= f[3] == "true";
        gap = gap.max(f[5].parse().unwrap());
        tv = tv.max(f[6].parse().unwrap());
    }
    let v = Verdict {
        passed: out.status.success() && all_passed && cells == 45 && gap <= 1e-8 && tv <= 1e-6,
        detail: format!("{cells} cells, max sup-norm gap {gap:.2e}, max ascent TV {tv:.2e}"),
    };
    within(v, start.elapsed(), Duration::from_secs(300))
}

fn gradients() -> Verdict {
    from_outcomes(
        &gradient_suite(SEED, 100).unwrap(),
        &["klq-gradient", "ppo-clip-gradient"],
    )
}

fn target_task() -> (FiniteMdp, PolicyTable, f64) {
    let (spec, rm) = build_target_string_task(4, vec![0, 1, 2], vec![vec![]], 6, 1.0, 1.0).unwrap();
    let tree = PrefixTree::build(&spec, &rm, &[0], 1.0, DEFAULT_STATE_BUDGET).unwrap();
    let mdp = tree.into_mdp();
    let pi_b = PolicyTable::uniform(mdp.num_states(), mdp.num_actions());
    let best = optimal_objective(&mdp, &pi_b, SoftRlParams::new(0.05, 1.0).unwrap()).unwrap();
    (mdp, pi_b, best)
}

/// Tuned learning rate shared by both algorithms on the target task.
fn target_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1.0,
        policy_lr_scale: 20.0,
        seed,
        ..TrainConfig::default()
    }
}

/// Final exact objective over `V*(root)` for three seeds, with the slowest run time.
fn target_ratios(algo: Algo) -> (Vec<f64>, Duration) {
    let (mdp, pi_b, best) = target_task();
    let params = SoftRlParams::new(0.05, 1.0).unwrap();
    let mut slowest = Duration::ZERO;
    let ratios = (0..3)
        .map(|seed| {
            let start = Instant::now();
            let report = train(algo, &mdp, &pi_b, &target_config(seed), None).unwrap();
            slowest = slowest.max(start.elapsed());
            policy_objective(&mdp, &report.final_params.policy().unwrap(), &pi_b, params).unwrap() / best
        })
        .collect();
    (ratios, slowest)
}

fn optimality() -> Verdict {
    let mdp = build_bandit(&[1.0, 0.0]).unwrap();
    let pi_b = PolicyTable::uniform(2, 2);
    let cfg = TrainConfig {
        tau: 1.0,
        learning_rate: 0.1,
        total_episodes: 192 * 200,
        seed: SEED,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = train(Algo::Klq, &mdp, &pi_b, &cfg, None).unwrap();
    let bandit_time = start.elapsed();
    let e = std::f64::consts::E;
    let tv = (report.final_params.policy().unwrap().prob(0, 0) - e / (e + 1.0)).abs();
    let (ratios, slowest) = target_ratios(Algo::Klq);
    let budget = Duration::from_secs(300);
    Verdict {
        passed: tv <= 0.02 && ratios.iter().all(|r| *r >= 0.95) && bandit_time.max(slowest) < budget,
        detail: format!(
            "bandit TV {tv:.2e}; target task J/V* per seed {ratios:.4?}; slowest run {:.1}s",
            bandit_time.max(slowest).as_secs_f64()
        ),
    }
}

fn parity() -> Verdict {
    let (klq_ratios, _) = target_ratios(Algo::Klq);
    let (ppo_ratios, _) = target_ratios(Algo::PpoClip);
    Verdict {
        passed: klq_ratios.iter().chain(&ppo_ratios).all(|r| *r >= 0.9),
        detail: format!("klq J/V* {klq_ratios:.4?}; ppo-clip J/V* {ppo_ratios:.4?}"),
    }
}

fn improvement() -> Verdict {
    let outcomes = soft_operator_suite(SEED, 20, 100).unwrap();
    from_outcomes(&outcomes, &["improvement-theorem"])
}

fn run_train(config: &Path, out: &Path) -> Vec<u8> {
    let status = Command::new(klq())
        .args(["train", "--quiet", "--seed", "5", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
    fs::read(out.join("metrics.csv")).unwrap()
}

fn determinism() -> Verdict {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("target.toml");
    let text = "algo = \"ppo-clip\"\n\n[task]\nkind = \"target-string\"\nalphabet_size = 4\ntarget = [0, 1, 2]\n\
                max_length = 6\n\n[train]\nlearning_rate = 1.0\npolicy_lr_scale = 20.0\ntotal_episodes = 1920\n";
    fs::write(&config, text).unwrap();
    let a = run_train(&config, &tmp.path().join("a"));
    let b = run_train(&config, &tmp.path().join("b"));
    let klq_config = tmp.path().join("klq.toml");
    fs::write(&klq_config, text.replace("ppo-clip", "klq")).unwrap();
    let c = run_train(&klq_config, &tmp.path().join("c"));
    let d = run_train(&klq_config, &tmp.path().join("d"));
    Verdict {
        passed: a == b && c == d && a.len() > 100 && a != c,
        detail: format!(
            "ppo-clip and klq reruns byte-identical over {} and {} bytes",
            a.len(),
            c.len()
        ),
    }
}

fn main() -> ExitCode {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check); 11] = [
        ("contraction", contraction),
        ("fixed-point", fixed_point),
        ("mapping-roundtrip", roundtrip),
        ("td-form-equality", td_forms),
        ("estimator-identity", estimator_identity),
        ("q-pi-v-equivalence", equivalence_grid),
        ("gradient-checks", gradients),
        ("desk-scale-optimality", optimality),
        ("klq-ppo-parity", parity),
        ("improvement-theorem", improvement),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let status = if v.passed { "PASS" } else { "FAIL" };
        println!("{status} {:>2} {name}: {}", i + 1, v.detail);
        failures += usize::from(!v.passed);
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
