//! Token-level prefix-tree MDPs.
//!
//! A decision state is a prompt together with a completion prefix `y_{1:t}`
//! that has fewer than `max_length` tokens and does not end in EOS. Actions
//! are next tokens. Emitting EOS ends the episode with the score of the
//! completion so far; emitting any other token that brings the completion to
//! `max_length` tokens ends it with the score of the full completion minus
//! the length penalty. All other rewards are zero. Every ending leads to one
//! shared absorbing terminal state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Outcome};

/// Default cap on the number of MDP states in an expanded tree.
pub const DEFAULT_STATE_BUDGET: usize = 200_000;

pub type Token = u32;

/// A token-level generation task.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTaskSpec {
    /// Number of tokens including EOS, which is always the last index.
    pub alphabet_size: usize,
    pub prompts: Vec<Vec<Token>>,
    /// Maximum number of completion tokens, EOS included.
    pub max_length: usize,
    /// Penalty `ω` subtracted from the score of truncated completions.
    pub length_penalty: f64,
}

impl TokenTaskSpec {
    pub fn new(alphabet_size: usize, prompts: Vec<Vec<Token>>, max_length: usize, length_penalty: f64) -> Result<Self> {
        let spec = Self {
            alphabet_size,
            prompts,
            max_length,
            length_penalty,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(Error::InvalidArgument(
                "alphabet needs at least one token besides EOS".into(),
            ));
        }
        if self.max_length == 0 {
            return Err(Error::InvalidArgument("max_length must be positive".into()));
        }
        if self.prompts.is_empty() {
            return Err(Error::InvalidArgument("at least one prompt is required".into()));
        }
        if !(self.length_penalty >= 0.0) || !self.length_penalty.is_finite() {
            return Err(Error::InvalidArgument(
                "length penalty must be finite and non-negative".into(),
            ));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if let Some(t) = p.iter().find(|&&t| t as usize >= self.alphabet_size) {
                return Err(Error::InvalidArgument(format!(
                    "prompt {i} has token {t} outside the alphabet"
                )));
            }
        }
        Ok(())
    }

    pub fn eos(&self) -> Token {
        (self.alphabet_size - 1) as Token
    }

    /// Decision states per prompt: `Σ_{k<max_length} (alphabet_size − 1)^k`.
    pub fn decision_states_per_prompt(&self) -> Option<usize> {
        let branching = self.alphabet_size - 1;
        let mut total: usize = 0;
        let mut level: usize = 1;
        for _ in 0..self.max_length {
            total = total.checked_add(level)?;
            level = level.checked_mul(branching)?;
        }
        Some(total)
    }
}

/// Deterministic scorer of a completion (EOS excluded) given its prompt.
pub trait CompletionScorer {
    fn score(&self, prompt: &[Token], completion: &[Token]) -> Result<f64>;
}

impl<F> CompletionScorer for F
where
    F: Fn(&[Token], &[Token]) -> Result<f64>,
{
    fn score(&self, prompt: &[Token], completion: &[Token]) -> Result<f64> {
        self(prompt, completion)
    }
}

/// How a leaf transition ended the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Eos,
    Truncated,
}

/// One episode-ending transition of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub state: usize,
    pub action: usize,
    pub prompt: usize,
    /// Completion tokens with EOS removed.
    pub completion: Vec<Token>,
    pub kind: LeafKind,
    pub reward: f64,
}

/// An expanded prefix tree with its prefix-to-id map.
#[derive(Debug, Clone)]
pub struct PrefixTree {
    spec: TokenTaskSpec,
    mdp: FiniteMdp,
    /// `(prompt index, completion prefix)` of every decision state.
    prefixes: Vec<(usize, Vec<Token>)>,
    lookup: HashMap<(usize, Vec<Token>), usize>,
    roots: Vec<usize>,
    terminal: usize,
}

impl PrefixTree {
    /// Expands the trees of the listed prompts into one MDP whose initial
    /// distribution is uniform over their roots.
    pub fn build(
        spec: &TokenTaskSpec,
        scorer: &dyn CompletionScorer,
        prompt_indices: &[usize],
        gamma: f64,
        state_budget: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if prompt_indices.is_empty() {
            return Err(Error::InvalidArgument("no prompts selected".into()));
        }
        if let Some(&p) = prompt_indices.iter().find(|&&p| p >= spec.prompts.len()) {
            return Err(Error::InvalidArgument(format!("prompt index {p} out of range")));
        }
        let required = spec
            .decision_states_per_prompt()
            .and_then(|n| n.checked_mul(prompt_indices.len()))
            .and_then(|n| n.checked_add(1))
            .unwrap_or(usize::MAX);
        if required > state_budget {
            return Err(Error::BudgetExceeded {
                required,
                budget: state_budget,
            });
        }
        let na = spec.alphabet_size;
        let eos = spec.eos();
        let num_decisions = required - 1;
        let terminal = num_decisions;

        let mut prefixes: Vec<(usize, Vec<Token>)> = Vec::with_capacity(num_decisions);
        let mut roots = Vec::with_capacity(prompt_indices.len());
        for &p in prompt_indices {
            roots.push(prefixes.len());
            prefixes.push((p, Vec::new()));
        }
        // Breadth-first: children are appended as their parents are visited.
        let mut outcomes: Vec<Vec<Outcome>> = Vec::with_capacity((num_decisions + 1) * na);
        let mut cursor = 0;
        while cursor < prefixes.len() {
            let (p, prefix) = prefixes[cursor].clone();
            let prompt = &spec.prompts[p];
            for a in 0..na as Token {
                let outcome = if a == eos {
                    Outcome {
                        next: terminal,
                        prob: 1.0,
                        reward: scorer.score(prompt, &prefix)?,
                    }
                } else {
                    let mut child = prefix.clone();
                    child.push(a);
                    if child.len() == spec.max_length {
                        Outcome {
                            next: terminal,
                            prob: 1.0,
                            reward: scorer.score(prompt, &child)? - spec.length_penalty,
                        }
                    } else {
                        let id = prefixes.len();
                        prefixes.push((p, child));
                        Outcome {
                            next: id,
                            prob: 1.0,
                            reward: 0.0,
                        }
                    }
                };
                if !outcome.reward.is_finite() {
                    return Err(Error::NonFinite(format!("score at state {cursor}, token {a}")));
                }
                outcomes.push(vec![outcome]);
            }
            cursor += 1;
        }
        debug_assert_eq!(prefixes.len(), num_decisions);
        for _ in 0..na {
            outcomes.push(Vec::new());
        }
        let mut terminal_flags = vec![false; num_decisions + 1];
        terminal_flags[terminal] = true;
        let mut initial = vec![0.0; num_decisions + 1];
        for &r in &roots {
            initial[r] += 1.0 / roots.len() as f64;
        }
        let mdp = FiniteMdp::new(num_decisions + 1, na, outcomes, terminal_flags, gamma, initial)?;
        let lookup = prefixes.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Ok(Self {
            spec: spec.clone(),
            mdp,
            prefixes,
            lookup,
            roots,
            terminal,
        })
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn into_mdp(self) -> FiniteMdp {
        self.mdp
    }

    pub fn spec(&self) -> &TokenTaskSpec {
        &self.spec
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn terminal_state(&self) -> usize {
        self.terminal
    }

    pub fn num_decision_states(&self) -> usize {
        self.prefixes.len()
    }

    /// Prompt index and completion prefix of a decision state.
    pub fn prefix(&self, s: usize) -> Option<(usize, &[Token])> {
        self.prefixes.get(s).map(|(p, k)| (*p, k.as_slice()))
    }

    pub fn state_of(&self, prompt: usize, prefix: &[Token]) -> Option<usize> {
        self.lookup.get(&(prompt, prefix.to_vec())).copied()
    }

    /// Last token of prompt plus prefix, or `None` when both are empty.
    pub fn context_token(&self, s: usize) -> Option<Token> {
        let (p, prefix) = self.prefix(s)?;
        prefix.last().or_else(|| self.spec.prompts[p].last()).copied()
    }

    /// Whether taking `a` at decision state `s` ends the episode, and how.
    pub fn leaf_kind(&self, s: usize, a: usize) -> Option<LeafKind> {
        let (_, prefix) = self.prefix(s)?;
        if a as Token == self.spec.eos() {
            Some(LeafKind::Eos)
        } else if prefix.len() + 1 == self.spec.max_length {
            Some(LeafKind::Truncated)
        } else {
            None
        }
    }

    /// Every episode-ending transition with its reward.
    pub fn leaves(&self) -> Vec<Leaf> {
        let mut out = Vec::new();
        for (s, (p, prefix)) in self.prefixes.iter().enumerate() {
            for a in 0..self.spec.alphabet_size {
                let Some(kind) = self.leaf_kind(s, a) else { continue };
                let mut completion = prefix.clone();
                if kind == LeafKind::Truncated {
                    completion.push(a as Token);
                }
                out.push(Leaf {
                    state: s,
                    action: a,
                    prompt: *p,
                    completion,
                    kind,
                    reward: self.mdp.outcomes(s, a)[0].reward,
                });
            }
        }
        out
    }
}

/// Expands the tree of a single prompt with `γ = 1` and the default budget.
pub fn prefix_tree_expand(
    spec: &TokenTaskSpec,
    scorer: &dyn CompletionScorer,
    prompt_index: usize,
) -> Result<PrefixTree> {
    PrefixTree::build(spec, scorer, &[prompt_index], 1.0, DEFAULT_STATE_BUDGET)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn length_scorer(_: &[Token], c: &[Token]) -> Result<f64> {
        Ok(c.len() as f64)
    }

    #[test]
    fn smallest_tree() {
        let spec = TokenTaskSpec::new(2, vec![vec![]], 1, 0.5).unwrap();
        let tree = prefix_tree_expand(&spec, &length_scorer, 0).unwrap();
        assert_eq!(tree.num_decision_states(), 1);
        assert_eq!(tree.mdp().num_states(), 2);
        let leaves = tree.leaves();
        assert_eq!(leaves.len(), 2);
        let eos = leaves.iter().find(|l| l.kind == LeafKind::Eos).unwrap();
        let trunc = leaves.iter().find(|l| l.kind == LeafKind::Truncated).unwrap();
        assert_eq!(eos.reward, 0.0);
        assert_eq!(trunc.reward, 1.0 - 0.5);
        assert_eq!(trunc.completion, vec![0]);
    }

    #[test]
    fn counts_decision_states() {
        let spec = TokenTaskSpec::new(3, vec![vec![]], 2, 0.0).unwrap();
        let tree = prefix_tree_expand(&spec, &length_scorer, 0).unwrap();
        assert_eq!(tree.num_decision_states(), 3);
        assert_eq!(tree.state_of(0, &[]), Some(0));
        assert!(tree.state_of(0, &[1]).is_some());
        assert!(tree.state_of(0, &[2]).is_none());
        let spec = TokenTaskSpec::new(4, vec![vec![]], 6, 0.0).unwrap();
        assert_eq!(spec.decision_states_per_prompt(), Some(364));
    }

    #[test]
    fn budget_reports_requirement() {
        let spec = TokenTaskSpec::new(4, vec![vec![]], 6, 0.0).unwrap();
        match PrefixTree::build(&spec, &length_scorer, &[0], 1.0, 100) {
            Err(Error::BudgetExceeded {
                required: 365,
                budget: 100,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_alphabet_prompt() {
        assert!(TokenTaskSpec::new(3, vec![vec![0, 3]], 2, 0.0).is_err());
    }

    #[test]
    fn forest_has_uniform_roots() {
        let spec = TokenTaskSpec::new(3, vec![vec![0], vec![1]], 2, 0.0).unwrap();
        let tree = PrefixTree::build(&spec, &length_scorer, &[0, 1], 1.0, 1000).unwrap();
        assert_eq!(tree.roots().len(), 2);
        for &r in tree.roots() {
            assert_eq!(tree.mdp().initial_distribution()[r], 0.5);
        }
        assert_eq!(tree.context_token(tree.roots()[1]), Some(1));
        assert!(tree.mdp().is_episodic());
    }
}
