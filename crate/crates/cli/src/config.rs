//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use klq_core::envs::{
    build_bandit, build_random_mdp, build_reference_policy, build_target_string_task, RandomMdpSpec,
    ReferencePolicySpec, RewardModelSpec,
};
use klq_core::equivalence::{EquivalenceOptions, StateWeighting};
use klq_core::io::{parse_corpus, parse_mdp};
use klq_core::learners::{Algo, KlDirection, TrainConfig, ValueInit};
use klq_core::mdp::DEFAULT_HORIZON_CAP;
use klq_core::prefix_tree::{PrefixTree, Token, TokenTaskSpec, DEFAULT_STATE_BUDGET};
use klq_core::{FiniteMdp, PolicyTable};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_algo")]
    pub algo: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "SweepConfig::is_empty")]
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<EquivalenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
}

fn default_algo() -> String {
    "klq".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// One decision state, one terminal; rewards per action.
    Bandit { rewards: Vec<f64> },
    /// Token task scored by position-wise matches against `target`.
    TargetString {
        alphabet_size: usize,
        target: Vec<Token>,
        #[serde(default = "empty_prompts")]
        prompts: Vec<Vec<Token>>,
        max_length: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Token task scored by occurrences of `token`.
    PrefixCount {
        alphabet_size: usize,
        token: Token,
        #[serde(default = "empty_prompts")]
        prompts: Vec<Vec<Token>>,
        max_length: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    RandomMdp {
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        #[serde(default)]
        sparsity: f64,
        #[serde(default)]
        num_terminal: usize,
        #[serde(default)]
        seed: u64,
    },
    /// MDP in the plain-text format.
    MdpFile { path: PathBuf },
}

fn empty_prompts() -> Vec<Vec<Token>> {
    vec![vec![]]
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceConfig {
    #[default]
    Uniform,
    Dirichlet {
        concentration: f64,
        seed: u64,
    },
    /// Bigram model fitted to a token corpus file.
    Bigram {
        corpus: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub tau: f64,
    /// Defaults to the discount of the task.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub lambda: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub policy_lr_scale: f64,
    pub epochs_per_batch: usize,
    pub rollouts_per_batch: usize,
    pub minibatch_size: usize,
    pub total_episodes: usize,
    pub clip_eps: f64,
    pub value_clip: f64,
    pub value_coef: f64,
    pub length_penalty: f64,
    pub penalty_beta: f64,
    pub penalty_direction: String,
    pub whiten_advantages: bool,
    /// Half-width of a uniform value-head initialisation; zero means zeros.
    pub value_init_scale: f64,
    pub post_step_loss: bool,
    pub horizon_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            tau: d.tau,
            gamma: None,
            lambda: d.lambda,
            alpha: d.alpha,
            learning_rate: d.learning_rate,
            policy_lr_scale: d.policy_lr_scale,
            epochs_per_batch: d.epochs_per_batch,
            rollouts_per_batch: d.rollouts_per_batch,
            minibatch_size: d.minibatch_size,
            total_episodes: d.total_episodes,
            clip_eps: d.clip_eps,
            value_clip: d.value_clip,
            value_coef: d.value_coef,
            length_penalty: d.length_penalty,
            penalty_beta: d.penalty_beta,
            penalty_direction: "reverse".into(),
            whiten_advantages: d.whiten_advantages,
            value_init_scale: 0.0,
            post_step_loss: d.post_step_loss,
            horizon_cap: DEFAULT_HORIZON_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tau: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lambda: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub learning_rate: Vec<f64>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.tau.is_empty() && self.lambda.is_empty() && self.learning_rate.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: PathBuf,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

fn default_episodes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub tau: f64,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub num_mdps: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub ascent: bool,
    pub dominance_candidates: usize,
    /// `uniform` or `visitation`.
    pub weighting: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt_v_at: Option<usize>,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            alpha: vec![0.25, 0.5, 1.0],
            lambda: vec![0.0, 0.5, 0.95],
            iterations: 10,
            num_mdps: 5,
            num_states: 5,
            num_actions: 3,
            gamma: 0.9,
            ascent: true,
            dominance_candidates: 0,
            weighting: "uniform".into(),
            corrupt_v_at: None,
        }
    }
}

impl EquivalenceConfig {
    pub fn options(&self, seed: u64) -> Result<EquivalenceOptions> {
        let weighting = match self.weighting.as_str() {
            "uniform" => StateWeighting::Uniform,
            "visitation" => StateWeighting::Visitation,
            other => bail!("unknown weighting {other:?}"),
        };
        Ok(EquivalenceOptions {
            iterations: self.iterations,
            ascent: self.ascent,
            dominance_candidates: self.dominance_candidates,
            weighting,
            seed,
            corrupt_v_at: self.corrupt_v_at,
            ..EquivalenceOptions::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub suite: String,
}

/// A built task and its reference policy.
pub struct Task {
    pub mdp: FiniteMdp,
    pub pi_b: PolicyTable,
}

impl ExperimentConfig {
    /// Reads and validates a config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(TaskConfig::MdpFile { path }) = &mut self.task {
            fix(path);
        }
        if let ReferenceConfig::Bigram { corpus } = &mut self.reference {
            fix(corpus);
        }
        if let Some(eval) = &mut self.eval {
            fix(&mut eval.policy);
        }
    }

    /// Static checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.algo()?;
        self.penalty_direction()?;
        let mut probe = self.train_config(self.train.gamma.unwrap_or(1.0))?;
        for (name, axis) in [
            ("tau", &self.sweep.tau),
            ("lambda", &self.sweep.lambda),
            ("learning_rate", &self.sweep.learning_rate),
        ] {
            ensure!(axis.iter().all(|v| v.is_finite()), "sweep.{name} values must be finite");
        }
        for point in self.sweep_points() {
            probe.tau = point.tau.unwrap_or(probe.tau);
            probe.lambda = point.lambda.unwrap_or(probe.lambda);
            probe.learning_rate = point.learning_rate.unwrap_or(probe.learning_rate);
            probe.validate()?;
        }
        if let Some(eq) = &self.equivalence {
            eq.options(self.seed)?;
            ensure!(eq.num_mdps > 0, "equivalence.num_mdps must be positive");
            ensure!(
                eq.num_states >= 1 && eq.num_actions >= 1,
                "equivalence MDPs need states and actions"
            );
        }
        if let Some(v) = &self.verify {
            v.suite.parse::<klq_core::verify::Suite>()?;
        }
        if let Some(e) = &self.eval {
            ensure!(e.episodes > 0, "eval.episodes must be positive");
        }
        Ok(())
    }

    pub fn algo(&self) -> Result<Algo> {
        Ok(self.algo.parse()?)
    }

    fn penalty_direction(&self) -> Result<KlDirection> {
        match self.train.penalty_direction.as_str() {
            "reverse" => Ok(KlDirection::Reverse),
            "forward" => Ok(KlDirection::Forward),
            other => bail!("unknown penalty_direction {other:?}"),
        }
    }

    /// Training hyperparameters for an MDP with discount `task_gamma`.
    pub fn train_config(&self, task_gamma: f64) -> Result<TrainConfig> {
        let t = &self.train;
        let value_init = if t.value_init_scale > 0.0 {
            ValueInit::Random {
                scale: t.value_init_scale,
                seed: self.seed,
            }
        } else {
            ValueInit::Zeros
        };
        let cfg = TrainConfig {
            tau: t.tau,
            gamma: t.gamma.unwrap_or(task_gamma),
            lambda: t.lambda,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            policy_lr_scale: t.policy_lr_scale,
            epochs_per_batch: t.epochs_per_batch,
            rollouts_per_batch: t.rollouts_per_batch,
            minibatch_size: t.minibatch_size,
            total_episodes: t.total_episodes,
            clip_eps: t.clip_eps,
            value_clip: t.value_clip,
            value_coef: t.value_coef,
            length_penalty: t.length_penalty,
            penalty_beta: t.penalty_beta,
            penalty_direction: self.penalty_direction()?,
            whiten_advantages: t.whiten_advantages,
            value_init,
            post_step_loss: t.post_step_loss,
            horizon_cap: t.horizon_cap,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cartesian product of the sweep axes; a single empty point without sweeps.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        fn axis(values: &[f64]) -> Vec<Option<f64>> {
            if values.is_empty() {
                vec![None]
            } else {
                values.iter().copied().map(Some).collect()
            }
        }
        let mut points = Vec::new();
        for tau in axis(&self.sweep.tau) {
            for lambda in axis(&self.sweep.lambda) {
                for learning_rate in axis(&self.sweep.learning_rate) {
                    points.push(SweepPoint {
                        tau,
                        lambda,
                        learning_rate,
                    });
                }
            }
        }
        points
    }

    /// This config pinned to one sweep point, with the sweep removed.
    pub fn at_point(&self, point: &SweepPoint) -> Self {
        let mut cfg = self.clone();
        cfg.sweep = SweepConfig::default();
        if let Some(v) = point.tau {
            cfg.train.tau = v;
        }
        if let Some(v) = point.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = point.learning_rate {
            cfg.train.learning_rate = v;
        }
        cfg
    }

    pub fn build_task(&self) -> Result<Task> {
        let task = self.task.as_ref().context("config has no [task] section")?;
        let omega = self.train.length_penalty;
        let (mdp, tree) = match task {
            TaskConfig::Bandit { rewards } => (build_bandit(rewards)?, None),
            TaskConfig::TargetString {
                alphabet_size,
                target,
                prompts,
                max_length,
                scale,
            } => {
                let (spec, rm) = build_target_string_task(
                    *alphabet_size,
                    target.clone(),
                    prompts.clone(),
                    *max_length,
                    omega,
                    *scale,
                )?;
                let tree = token_tree(&spec, &rm)?;
                (tree.mdp().clone(), Some(tree))
            }
            TaskConfig::PrefixCount {
                alphabet_size,
                token,
                prompts,
                max_length,
                scale,
            } => {
                let spec = TokenTaskSpec::new(*alphabet_size, prompts.clone(), *max_length, omega)?;
                ensure!(*token < spec.eos(), "token {token} is EOS or outside the alphabet");
                let rm = RewardModelSpec::PrefixCount {
                    token: *token,
                    scale: *scale,
                };
                let tree = token_tree(&spec, &rm)?;
                (tree.mdp().clone(), Some(tree))
            }
            TaskConfig::RandomMdp {
                num_states,
                num_actions,
                gamma,
                sparsity,
                num_terminal,
                seed,
            } => {
                let spec = RandomMdpSpec {
                    sparsity: *sparsity,
                    num_terminal: *num_terminal,
                    ..RandomMdpSpec::new(*num_states, *num_actions, *gamma, *seed)
                };
                (build_random_mdp(&spec)?, None)
            }
            TaskConfig::MdpFile { path } => {
                let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                (parse_mdp(std::io::BufReader::new(file))?, None)
            }
        };
        let spec = match &self.reference {
            ReferenceConfig::Uniform => ReferencePolicySpec::Uniform,
            ReferenceConfig::Dirichlet { concentration, seed } => ReferencePolicySpec::DirichletRandom {
                concentration: *concentration,
                seed: *seed,
            },
            ReferenceConfig::Bigram { corpus } => {
                let text = fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
                ReferencePolicySpec::Bigram {
                    corpus: parse_corpus(&text, mdp.num_actions())?,
                }
            }
        };
        let pi_b = build_reference_policy(&spec, &mdp, tree.as_ref())?;
        Ok(Task { mdp, pi_b })
    }
}

fn token_tree(spec: &TokenTaskSpec, rm: &RewardModelSpec) -> Result<PrefixTree> {
    let prompts: Vec<usize> = (0..spec.prompts.len()).collect();
    Ok(PrefixTree::build(spec, rm, &prompts, 1.0, DEFAULT_STATE_BUDGET)?)
}

/// One combination of sweep values; `None` keeps the base value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
}

impl SweepPoint {
    /// Child directory name, e.g. `tau=0.05_lr=0.1`.
    pub fn dir_name(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.tau {
            parts.push(format!("tau={v}"));
        }
        if let Some(v) = self.lambda {
            parts.push(format!("lambda={v}"));
        }
        if let Some(v) = self.learning_rate {
            parts.push(format!("lr={v}"));
        }
        parts.join("_")
    }

    pub fn is_base(&self) -> bool {
        self.tau.is_none() && self.lambda.is_none() && self.learning_rate.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BANDIT: &str = r#"
algo = "klq"
seed = 3

[task]
kind = "bandit"
rewards = [1.0, 0.0]

[train]
tau = 1.0
learning_rate = 0.1
rollouts_per_batch = 16
minibatch_size = 16
total_episodes = 16
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::parse(BANDIT).unwrap();
        assert_eq!(cfg.train.tau, 1.0);
        assert_eq!(cfg.train.epochs_per_batch, 4);
        let back = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let task = cfg.build_task().unwrap();
        assert_eq!(task.mdp.num_states(), 2);
        assert_eq!(cfg.train_config(1.0).unwrap().seed, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse("algo = \"klq\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[train]\ntaux = 1.0\n").is_err());
        assert!(ExperimentConfig::parse("algo = \"sgd\"\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nalpha = 0.0\n").is_err());
        assert!(ExperimentConfig::parse("[sweep]\ntau = [0.1, -1.0]\n").is_err());
        assert!(ExperimentConfig::parse("[task]\nkind = \"maze\"\n").is_err());
    }

    #[test]
    fn sweep_is_a_product() {
        let cfg = ExperimentConfig::parse("[sweep]\ntau = [0.01, 0.05]\nlearning_rate = [0.1, 0.2, 0.3]\n").unwrap();
        let points = cfg.sweep_points();
        assert_eq!(points.len(), 6);
        assert_eq!(points[1].dir_name(), "tau=0.01_lr=0.2");
        let child = cfg.at_point(&points[5]);
        assert_eq!((child.train.tau, child.train.learning_rate), (0.05, 0.3));
        assert!(child.sweep.is_empty());
        assert!(ExperimentConfig::parse("").unwrap().sweep_points()[0].is_base());
    }
}
