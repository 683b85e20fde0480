//! Synthetic reward models, reference policies and task builders.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Outcome};
use crate::prefix_tree::{CompletionScorer, PrefixTree, Token, TokenTaskSpec};
use crate::rng::{derive_seed, seeded};
use crate::soft::DENSE_PAIR_BUDGET;
use crate::tables::{PolicyTable, SUPPORT_FLOOR};

/// Deterministic completion scorer.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardModelSpec {
    /// `scale ×` number of positions `i < min(len)` with `completion[i] == target[i]`.
    TargetMatch { target: Vec<Token>, scale: f64 },
    /// `scale ×` number of occurrences of `token` in the completion.
    PrefixCount { token: Token, scale: f64 },
    /// Explicit score per completion; prompts are ignored.
    Table {
        entries: BTreeMap<Vec<Token>, f64>,
        scale: f64,
    },
}

impl RewardModelSpec {
    pub fn base_score(&self, _prompt: &[Token], completion: &[Token]) -> Result<f64> {
        match self {
            Self::TargetMatch { target, scale } => {
                let hits = target.iter().zip(completion).filter(|(t, c)| t == c).count();
                Ok(scale * hits as f64)
            }
            Self::PrefixCount { token, scale } => {
                Ok(scale * completion.iter().filter(|&&t| t == *token).count() as f64)
            }
            Self::Table { entries, scale } => entries
                .get(completion)
                .map(|v| scale * v)
                .ok_or_else(|| Error::MissingLeaf(completion.to_vec())),
        }
    }
}

impl CompletionScorer for RewardModelSpec {
    fn score(&self, prompt: &[Token], completion: &[Token]) -> Result<f64> {
        self.base_score(prompt, completion)
    }
}

/// Score of a completion, less `ω` when it was truncated.
pub fn score_completion(
    spec: &RewardModelSpec,
    prompt: &[Token],
    completion: &[Token],
    omega: f64,
    truncated: bool,
) -> Result<f64> {
    let base = spec.base_score(prompt, completion)?;
    Ok(if truncated { base - omega } else { base })
}

/// Recipe for a reference policy `π_b`.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferencePolicySpec {
    Uniform,
    /// Each row drawn from a symmetric Dirichlet.
    DirichletRandom {
        concentration: f64,
        seed: u64,
    },
    /// Add-one-smoothed next-token frequencies keyed by the previous token
    /// (or the start of text). Token-task MDPs only.
    Bigram {
        corpus: Vec<Vec<Token>>,
    },
}

/// Builds `π_b` over every state of `mdp`, floored to full support.
///
/// `tree` supplies the token context each state needs for the bigram kind.
pub fn build_reference_policy(
    spec: &ReferencePolicySpec,
    mdp: &FiniteMdp,
    tree: Option<&PrefixTree>,
) -> Result<PolicyTable> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let table = match spec {
        ReferencePolicySpec::Uniform => PolicyTable::uniform(ns, na),
        ReferencePolicySpec::DirichletRandom { concentration, seed } => {
            let mut rng = seeded(*seed);
            let mut probs = Vec::with_capacity(ns * na);
            for _ in 0..ns {
                probs.extend(dirichlet_row(na, *concentration, &mut rng)?);
            }
            PolicyTable::from_probs(ns, na, probs)?
        }
        ReferencePolicySpec::Bigram { corpus } => {
            let tree = tree.ok_or_else(|| Error::InvalidArgument("bigram reference needs a token task".into()))?;
            let model = BigramModel::fit(corpus, na)?;
            let mut probs = Vec::with_capacity(ns * na);
            for s in 0..ns {
                if mdp.is_terminal(s) {
                    probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
                } else {
                    probs.extend_from_slice(model.row(tree.context_token(s)));
                }
            }
            PolicyTable::from_probs(ns, na, probs)?
        }
    };
    Ok(table.floored(SUPPORT_FLOOR))
}

/// Add-one-smoothed bigram next-token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    alphabet_size: usize,
    /// Row 0 is the start-of-text context; row `t + 1` follows token `t`.
    rows: Vec<f64>,
}

impl BigramModel {
    /// Counts every transition in the corpus, including start → first token
    /// and last token → EOS.
    pub fn fit(corpus: &[Vec<Token>], alphabet_size: usize) -> Result<Self> {
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::InvalidArgument("bigram corpus is empty".into()));
        }
        let eos = alphabet_size - 1;
        let mut counts = vec![1.0; (alphabet_size + 1) * alphabet_size];
        for seq in corpus {
            let mut ctx = 0;
            for &t in seq {
                let t = t as usize;
                if t >= alphabet_size {
                    return Err(Error::InvalidArgument(format!("corpus token {t} outside the alphabet")));
                }
                counts[ctx * alphabet_size + t] += 1.0;
                ctx = t + 1;
            }
            if !seq.is_empty() {
                counts[ctx * alphabet_size + eos] += 1.0;
            }
        }
        for row in counts.chunks_mut(alphabet_size) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|c| *c /= total);
        }
        Ok(Self {
            alphabet_size,
            rows: counts,
        })
    }

    pub fn row(&self, context: Option<Token>) -> &[f64] {
        let ctx = context.map_or(0, |t| t as usize + 1);
        &self.rows[ctx * self.alphabet_size..(ctx + 1) * self.alphabet_size]
    }
}

fn dirichlet_row<R: Rng + ?Sized>(n: usize, concentration: f64, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::InvalidArgument(format!("Dirichlet concentration {concentration}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|x| x / total).collect());
        }
    }
}

/// Parameters of a random test-bed MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    /// Fraction of next states excluded from each transition row, in `[0, 1)`.
    pub sparsity: f64,
    /// The last `num_terminal` states are absorbing.
    pub num_terminal: usize,
    pub seed: u64,
}

impl RandomMdpSpec {
    pub fn new(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> Self {
        Self {
            num_states,
            num_actions,
            gamma,
            sparsity: 0.0,
            num_terminal: 0,
            seed,
        }
    }
}

/// Dirichlet(1) transition rows, rewards uniform in `[−1, 1]` per
/// `(s, a, s')`, initial distribution uniform over non-terminal states.
pub fn build_random_mdp(spec: &RandomMdpSpec) -> Result<FiniteMdp> {
    let (ns, na) = (spec.num_states, spec.num_actions);
    if ns == 0 || na == 0 {
        return Err(Error::InvalidArgument(
            "random MDP needs at least one state and action".into(),
        ));
    }
    if ns.saturating_mul(na) > DENSE_PAIR_BUDGET {
        return Err(Error::BudgetExceeded {
            required: ns * na,
            budget: DENSE_PAIR_BUDGET,
        });
    }
    if spec.num_terminal >= ns {
        return Err(Error::InvalidArgument("at least one state must be non-terminal".into()));
    }
    if !(0.0..1.0).contains(&spec.sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must lie in [0, 1), got {}",
            spec.sparsity
        )));
    }
    let mut rng = seeded(derive_seed(spec.seed, &[0x6d_6470]));
    let first_terminal = ns - spec.num_terminal;
    let keep = ((ns as f64) * (1.0 - spec.sparsity)).ceil().max(1.0) as usize;
    let mut outcomes = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for _ in 0..na {
            if s >= first_terminal {
                outcomes.push(Vec::new());
                continue;
            }
            let mut support = rand::seq::index::sample(&mut rng, ns, keep).into_vec();
            support.sort_unstable();
            let probs = dirichlet_row(keep, 1.0, &mut rng)?;
            let row = support
                .into_iter()
                .zip(probs)
                .map(|(next, prob)| Outcome {
                    next,
                    prob,
                    reward: rng.random_range(-1.0..=1.0),
                })
                .collect();
            outcomes.push(row);
        }
    }
    let terminal: Vec<bool> = (0..ns).map(|s| s >= first_terminal).collect();
    let initial: Vec<f64> = (0..ns)
        .map(|s| {
            if s < first_terminal {
                1.0 / first_terminal as f64
            } else {
                0.0
            }
        })
        .collect();
    FiniteMdp::new(ns, na, outcomes, terminal, spec.gamma, initial)
}

/// One decision state whose actions all end the episode with the given
/// rewards; `γ = 1`.
pub fn build_bandit(rewards: &[f64]) -> Result<FiniteMdp> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("bandit needs at least one arm".into()));
    }
    let na = rewards.len();
    let mut outcomes: Vec<Vec<Outcome>> = rewards
        .iter()
        .map(|&reward| {
            vec![Outcome {
                next: 1,
                prob: 1.0,
                reward,
            }]
        })
        .collect();
    outcomes.extend((0..na).map(|_| Vec::new()));
    FiniteMdp::new(2, na, outcomes, vec![false, true], 1.0, vec![1.0, 0.0])
}

/// A target-matching token task.
pub fn build_target_string_task(
    alphabet_size: usize,
    target: Vec<Token>,
    prompts: Vec<Vec<Token>>,
    max_length: usize,
    omega: f64,
    scale: f64,
) -> Result<(TokenTaskSpec, RewardModelSpec)> {
    let spec = TokenTaskSpec::new(alphabet_size, prompts, max_length, omega)?;
    if let Some(t) = target.iter().find(|&&t| t >= spec.eos()) {
        return Err(Error::InvalidArgument(format!(
            "target token {t} is EOS or outside the alphabet"
        )));
    }
    if max_length < target.len() + 1 {
        return Err(Error::InvalidArgument(
            "max_length must leave room for the target and EOS".into(),
        ));
    }
    Ok((spec, RewardModelSpec::TargetMatch { target, scale }))
}
