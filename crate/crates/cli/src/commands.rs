//! Subcommand implementations. Each returns `Ok(false)` when a check fails.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use klq_core::envs::{build_random_mdp, RandomMdpSpec};
use klq_core::equivalence::{run_equivalence_check, UpdateParams};
use klq_core::io::{parse_policy, write_policy, write_q, write_v, MetricsWriter};
use klq_core::learners::{rollout_metrics, train as run_training, MetricsRow};
use klq_core::rng::{derive_seed, seeded};
use klq_core::soft::{policy_objective, solve_soft_optimal, SoftRlParams};
use klq_core::verify::{random_policy, random_q, run_suite, Suite};

use crate::config::{EquivalenceConfig, ExperimentConfig, Task};

/// Global flags.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

impl Options {
    fn load(&self, required: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None if required => bail!("this command needs --config"),
            None => ExperimentConfig::parse("")?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig, fallback: &str) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(fallback))
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn train(opts: &Options) -> Result<bool> {
    let cfg = opts.load(true)?;
    let algo = cfg.algo()?;
    let task = cfg.build_task()?;
    let out = opts.out_dir(&cfg, algo.name());
    for point in cfg.sweep_points() {
        let dir = if point.is_base() {
            out.clone()
        } else {
            out.join(point.dir_name())
        };
        let child = cfg.at_point(&point);
        let last = train_one(&child, &task, &dir).with_context(|| format!("run {}", dir.display()))?;
        if let Some(row) = last {
            opts.say(format!(
                "{}: {} batches, score {:.4}, kl {:.4}, rlhf {:.4}",
                dir.display(),
                row.batch + 1,
                row.mean_score,
                row.mean_kl,
                row.rlhf_reward
            ));
        }
    }
    Ok(true)
}

/// Writes one run directory; leaves an `ERROR` file behind on failure.
fn train_one(cfg: &ExperimentConfig, task: &Task, dir: &Path) -> Result<Option<MetricsRow>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let marker = dir.join("ERROR");
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = (|| {
        let mut snapshot = cfg.clone();
        snapshot.out = None;
        fs::write(dir.join("config.toml"), snapshot.to_toml()?)?;
        fs::write(dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
        let train_cfg = cfg.train_config(task.mdp.gamma())?;
        let mut metrics = MetricsWriter::new(create(&dir.join("metrics.csv"))?)?;
        let mut sink = |row: &MetricsRow| metrics.write_row(row);
        let report = run_training(cfg.algo()?, &task.mdp, &task.pi_b, &train_cfg, Some(&mut sink))?;
        let mut f = create(&dir.join("final_policy.csv"))?;
        write_policy(&report.final_params.policy()?, &mut f)?;
        f.flush()?;
        let mut f = create(&dir.join("final_value.csv"))?;
        write_v(&report.final_params.value_table()?, &mut f)?;
        f.flush()?;
        Ok(report.rows.last().copied())
    })();
    if let Err(e) = &result {
        fs::write(&marker, format!("{e:#}\n"))?;
    }
    result
}

pub fn solve(opts: &Options) -> Result<bool> {
    let cfg = opts.load(true)?;
    let task = cfg.build_task()?;
    let out = opts.out_dir(&cfg, "solve");
    fs::create_dir_all(&out)?;
    let params = SoftRlParams::for_mdp(&task.mdp, cfg.train.tau)?;
    let opt = solve_soft_optimal(&task.mdp, &task.pi_b, params)?;
    let mut f = create(&out.join("q_star.csv"))?;
    write_q(&opt.q, &mut f)?;
    f.flush()?;
    let mut f = create(&out.join("policy_star.csv"))?;
    write_policy(&opt.policy, &mut f)?;
    f.flush()?;
    let mut f = create(&out.join("v_star.csv"))?;
    write_v(&opt.v, &mut f)?;
    f.flush()?;
    let start: f64 = task
        .mdp
        .initial_distribution()
        .iter()
        .enumerate()
        .map(|(s, p)| p * opt.v.get(s))
        .sum();
    opts.say(format!("V* under the initial distribution: {start:.10}"));
    Ok(true)
}

pub fn eval(opts: &Options) -> Result<bool> {
    let cfg = opts.load(true)?;
    let spec = cfg.eval.clone().context("config has no [eval] section")?;
    let task = cfg.build_task()?;
    let file = File::open(&spec.policy).with_context(|| format!("opening policy {}", spec.policy.display()))?;
    let policy = parse_policy(BufReader::new(file)).with_context(|| format!("reading {}", spec.policy.display()))?;
    task.mdp.check_policy(&policy)?;
    let tau = cfg.train.tau;
    let summary = rollout_metrics(
        &task.mdp,
        &policy,
        &task.pi_b,
        tau,
        derive_seed(cfg.seed, &[0x6576]),
        spec.episodes,
        cfg.train.horizon_cap,
    )?;
    let expected = policy_objective(&task.mdp, &policy, &task.pi_b, SoftRlParams::for_mdp(&task.mdp, tau)?)?;
    let out = opts.out_dir(&cfg, "eval");
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_writer(create(&out.join("eval.csv"))?);
    w.write_record([
        "episodes",
        "mean_score",
        "mean_kl",
        "rlhf_reward",
        "expected_rlhf_reward",
    ])?;
    w.write_record([
        spec.episodes.to_string(),
        summary.mean_score.to_string(),
        summary.mean_kl.to_string(),
        summary.rlhf_reward.to_string(),
        expected.to_string(),
    ])?;
    w.flush()?;
    opts.say(format!(
        "score {:.4}, kl {:.4}, rlhf {:.4}, expected rlhf {:.4}",
        summary.mean_score, summary.mean_kl, summary.rlhf_reward, expected
    ));
    Ok(true)
}

pub fn verify(opts: &Options, suite: Option<&str>) -> Result<bool> {
    let cfg = opts.load(false)?;
    let name = suite
        .map(str::to_owned)
        .or_else(|| cfg.verify.as_ref().map(|v| v.suite.clone()))
        .unwrap_or_else(|| "all".into());
    let suite: Suite = name.parse()?;
    let outcomes = run_suite(suite, cfg.seed)?;
    let mut lines = Vec::new();
    for o in &outcomes {
        let line = o.to_string();
        if !o.passed || !opts.quiet {
            println!("{line}");
        }
        lines.push(line);
    }
    if let Some(out) = opts.out.clone().or(cfg.out) {
        fs::create_dir_all(&out)?;
        fs::write(out.join("verify.txt"), lines.join("\n") + "\n")?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

pub fn equivalence(opts: &Options) -> Result<bool> {
    let cfg = opts.load(false)?;
    let eq = cfg.equivalence.clone().unwrap_or_default();
    let options = eq.options(cfg.seed)?;
    let out = opts.out_dir(&cfg, "equivalence");
    fs::create_dir_all(&out)?;
    let mut summary = csv::Writer::from_writer(create(&out.join("summary.csv"))?);
    summary.write_record([
        "descriptor",
        "alpha",
        "lambda",
        "passed",
        "first_bad_iteration",
        "max_discrepancy",
        "max_ascent_gap",
        "envelope_holds",
    ])?;
    let mut all_passed = true;
    for m in 0..eq.num_mdps {
        let (mdp, pi_b, q0) = grid_instance(&eq, cfg.seed, m)?;
        for &alpha in &eq.alpha {
            for &lambda in &eq.lambda {
                let up = UpdateParams {
                    tau: eq.tau,
                    lambda,
                    alpha,
                };
                let descriptor = format!("mdp{m}_alpha{alpha}_lambda{lambda}");
                let report = run_equivalence_check(&mdp, &pi_b, up, &q0, &options, &descriptor)?;
                report.write_csv(create(&out.join(format!("{descriptor}.csv")))?)?;
                fs::write(out.join(format!("{descriptor}.txt")), report.to_text())?;
                summary.write_record([
                    descriptor.clone(),
                    alpha.to_string(),
                    lambda.to_string(),
                    report.passed.to_string(),
                    report.first_bad_iteration.map(|k| k.to_string()).unwrap_or_default(),
                    report.max_discrepancy().to_string(),
                    report.max_ascent_gap().to_string(),
                    report.envelope_holds.to_string(),
                ])?;
                if !report.passed {
                    all_passed = false;
                    println!(
                        "FAIL {descriptor}: first bad iteration {:?}",
                        report.first_bad_iteration
                    );
                } else {
                    opts.say(format!(
                        "PASS {descriptor}: discrepancy {:.2e}, ascent gap {:.2e}",
                        report.max_discrepancy(),
                        report.max_ascent_gap()
                    ));
                }
            }
        }
    }
    summary.flush()?;
    Ok(all_passed)
}

/// Random MDP, reference policy and starting action-values for grid cell `m`.
fn grid_instance(
    eq: &EquivalenceConfig,
    seed: u64,
    m: usize,
) -> Result<(klq_core::FiniteMdp, klq_core::PolicyTable, klq_core::QTable)> {
    let spec = RandomMdpSpec {
        num_terminal: m % 2,
        ..RandomMdpSpec::new(
            eq.num_states,
            eq.num_actions,
            eq.gamma,
            derive_seed(seed, &[m as u64, 1]),
        )
    };
    let mdp = build_random_mdp(&spec)?;
    let mut rng = seeded(derive_seed(seed, &[m as u64, 2]));
    let pi_b = random_policy(eq.num_states, eq.num_actions, 1.0, &mut rng)?;
    let q0 = random_q(eq.num_states, eq.num_actions, 2.0, &mut rng);
    Ok((mdp, pi_b, q0))
}
