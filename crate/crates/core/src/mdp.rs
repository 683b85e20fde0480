//! Finite MDPs, rollouts and state-visitation distributions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tables::PolicyTable;

/// Row-sum tolerance for transition kernels.
pub const KERNEL_TOL: f64 = 1e-12;

/// Step cap used for rollouts on non-episodic MDPs.
pub const DEFAULT_HORIZON_CAP: usize = 1000;

/// Upper bound on the number of states in a dense state-level solve.
pub const DENSE_STATE_BUDGET: usize = 5000;

/// One possible successor of a `(state, action)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// Finite MDP with a sparse transition kernel.
///
/// Terminal states are absorbing: every action loops back with probability
/// one and reward zero. With `gamma == 1` the non-terminal part of the
/// transition graph must be acyclic, which bounds every episode length.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    outcomes: Vec<Vec<Outcome>>,
    terminal: Vec<bool>,
    gamma: f64,
    initial: Vec<f64>,
    topo_order: Option<Vec<usize>>,
}

impl FiniteMdp {
    /// Builds and validates an MDP.
    ///
    /// `outcomes[s * num_actions + a]` lists the successors of `(s, a)`.
    /// Rows of terminal states may be left empty, in which case the
    /// absorbing self-loop is filled in.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        mut outcomes: Vec<Vec<Outcome>>,
        terminal: Vec<bool>,
        gamma: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidMdp("need at least one state and one action".into()));
        }
        if outcomes.len() != num_states * num_actions {
            return Err(Error::InvalidMdp(format!(
                "expected {} transition rows, got {}",
                num_states * num_actions,
                outcomes.len()
            )));
        }
        if terminal.len() != num_states || initial.len() != num_states {
            return Err(Error::InvalidMdp("terminal/initial length mismatch".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside [0, 1]")));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &mut outcomes[s * num_actions + a];
                if terminal[s] {
                    if row.is_empty() {
                        row.push(Outcome {
                            next: s,
                            prob: 1.0,
                            reward: 0.0,
                        });
                    } else if row.len() != 1 || row[0].next != s || row[0].prob != 1.0 || row[0].reward != 0.0 {
                        return Err(Error::InvalidMdp(format!(
                            "terminal state {s} must be absorbing with zero reward"
                        )));
                    }
                }
                check_distribution(row.iter().map(|o| o.prob), &format!("transition ({s},{a})"))?;
                for o in row.iter() {
                    if o.next >= num_states {
                        return Err(Error::InvalidMdp(format!("successor {} out of range", o.next)));
                    }
                    if !o.reward.is_finite() {
                        return Err(Error::InvalidMdp(format!("non-finite reward at ({s},{a})")));
                    }
                }
            }
        }
        check_distribution(initial.iter().copied(), "initial distribution")?;

        let mut mdp = Self {
            num_states,
            num_actions,
            outcomes,
            terminal,
            gamma,
            initial,
            topo_order: None,
        };
        mdp.topo_order = mdp.compute_topo_order();
        if gamma == 1.0 && mdp.topo_order.is_none() {
            return Err(Error::NotEpisodic);
        }
        Ok(mdp)
    }

    /// Kahn's algorithm over non-terminal states; `None` on a cycle.
    fn compute_topo_order(&self) -> Option<Vec<usize>> {
        let n = self.num_states;
        let mut indegree = vec![0usize; n];
        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
        for s in (0..n).filter(|&s| !self.terminal[s]) {
            let mut succ: Vec<usize> = (0..self.num_actions)
                .flat_map(|a| self.outcomes(s, a).iter())
                .filter(|o| o.prob > 0.0 && !self.terminal[o.next])
                .map(|o| o.next)
                .collect();
            succ.sort_unstable();
            succ.dedup();
            for &t in &succ {
                indegree[t] += 1;
            }
            edges[s] = succ;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&s| !self.terminal[s] && indegree[s] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(s) = queue.pop() {
            order.push(s);
            for &t in &edges[s] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    queue.push(t);
                }
            }
        }
        let non_terminal = self.terminal.iter().filter(|t| !**t).count();
        (order.len() == non_terminal).then_some(order)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Copy of this MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.outcomes.clone(),
            self.terminal.clone(),
            gamma,
            self.initial.clone(),
        )
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.outcomes[s * self.num_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn non_terminal_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_states).filter(|&s| !self.terminal[s])
    }

    /// True when the non-terminal transition graph is acyclic.
    pub fn is_episodic(&self) -> bool {
        self.topo_order.is_some()
    }

    /// Non-terminal states ordered so that every successor comes later.
    pub fn topological_order(&self) -> Option<&[usize]> {
        self.topo_order.as_deref()
    }

    /// Longest possible episode length for an episodic MDP.
    pub fn horizon_bound(&self) -> Option<usize> {
        let order = self.topo_order.as_ref()?;
        let mut depth = vec![0usize; self.num_states];
        for &s in order.iter().rev() {
            let d = (0..self.num_actions)
                .flat_map(|a| self.outcomes(s, a).iter())
                .filter(|o| o.prob > 0.0)
                .map(|o| if self.terminal[o.next] { 1 } else { 1 + depth[o.next] })
                .max()
                .unwrap_or(1);
            depth[s] = d;
        }
        Some(order.iter().map(|&s| depth[s]).max().unwrap_or(0))
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.outcomes(s, a).iter().map(|o| o.prob * o.reward).sum()
    }

    /// Checks that a policy table matches this MDP's shape.
    pub fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(Error::InvalidPolicy(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Samples one transition from a non-terminal state.
    pub fn sample_step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64, bool)> {
        if s >= self.num_states || a >= self.num_actions {
            return Err(Error::InvalidArgument(format!("({s},{a}) out of range")));
        }
        if self.terminal[s] {
            return Err(Error::TerminalStep(s));
        }
        let row = self.outcomes(s, a);
        let o = row[sample_index(row.iter().map(|o| o.prob), rng)];
        Ok((o.next, o.reward, self.terminal[o.next]))
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(self.initial.iter().copied(), rng)
    }
}

fn check_distribution(probs: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in probs {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidMdp(format!("{what}: bad probability {p}")));
        }
        sum += p;
        count += 1;
    }
    if count == 0 || (sum - 1.0).abs() > KERNEL_TOL * count.max(1) as f64 {
        return Err(Error::InvalidMdp(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

/// Inverse-CDF draw from a discrete distribution. Falls back to the last
/// positive entry when rounding leaves the uniform draw past the total.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// How an episode stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeEnd {
    /// The final state is terminal.
    Terminal,
    /// The step cap was hit in a non-terminal state.
    HorizonCap,
}

/// One rollout `s_0, a_0, r_1, s_1, …, s_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    /// `rewards[t]` is `r_{t+1}`.
    pub rewards: Vec<f64>,
    /// `log π_old(a_t|s_t)` recorded at sampling time.
    pub behavior_log_probs: Vec<f64>,
    pub end: EpisodeEnd,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn reached_terminal(&self) -> bool {
        self.end == EpisodeEnd::Terminal
    }

    /// Whether `s_{t}` is terminal (only possible for `t == T`).
    pub fn is_terminal_at(&self, t: usize) -> bool {
        t == self.len() && self.reached_terminal()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Rollouts sampled under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    /// Start state of each trajectory; for token tasks this identifies the prompt root.
    pub prompt_ids: Vec<usize>,
    pub rng_seed: u64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Samples one episode from `start`, optionally forcing the first action.
pub fn rollout_episode<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    start: usize,
    first_action: Option<usize>,
    rng: &mut R,
    horizon_cap: usize,
) -> Result<Trajectory> {
    if horizon_cap == 0 {
        return Err(Error::InvalidArgument("horizon_cap must be at least 1".into()));
    }
    mdp.check_policy(policy)?;
    let mut traj = Trajectory {
        states: vec![start],
        actions: Vec::new(),
        rewards: Vec::new(),
        behavior_log_probs: Vec::new(),
        end: EpisodeEnd::Terminal,
    };
    let mut s = start;
    if mdp.is_terminal(s) {
        return Ok(traj);
    }
    loop {
        if traj.actions.len() == horizon_cap {
            traj.end = EpisodeEnd::HorizonCap;
            return Ok(traj);
        }
        let a = match (traj.actions.is_empty(), first_action) {
            (true, Some(a)) => a,
            _ => sample_index(policy.row(s).iter().copied(), rng),
        };
        let (next, reward, done) = mdp.sample_step(s, a, rng)?;
        traj.actions.push(a);
        traj.rewards.push(reward);
        traj.behavior_log_probs.push(policy.log_prob(s, a));
        traj.states.push(next);
        s = next;
        if done {
            return Ok(traj);
        }
    }
}

/// Samples `n_episodes` independent episodes; episode `i` uses substream `i`
/// of `seed`, so the result does not depend on evaluation order.
pub fn rollout_batch(
    mdp: &FiniteMdp,
    policy: &PolicyTable,
    seed: u64,
    n_episodes: usize,
    horizon_cap: usize,
) -> Result<TrajectoryBatch> {
    mdp.check_policy(policy)?;
    let mut trajectories = Vec::with_capacity(n_episodes);
    let mut prompt_ids = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut rng = substream(seed, i as u64);
        let start = mdp.sample_initial(&mut rng);
        trajectories.push(rollout_episode(mdp, policy, start, None, &mut rng, horizon_cap)?);
        prompt_ids.push(start);
    }
    Ok(TrajectoryBatch {
        trajectories,
        prompt_ids,
        rng_seed: seed,
    })
}

/// State-to-state kernel induced by a policy, `P_π(s, s')`.
pub fn policy_state_kernel(mdp: &FiniteMdp, policy: &PolicyTable) -> DMatrix<f64> {
    let n = mdp.num_states();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for o in mdp.outcomes(s, a) {
                p[(s, o.next)] += w * o.prob;
            }
        }
    }
    p
}

/// Normalised state visitation of `policy`.
///
/// For `gamma < 1` this is the discounted occupancy `(1−γ) Σ_t γ^t P(s_t = s)`
/// over all states, from a dense solve. For `gamma == 1` (episodic only) it
/// is the expected number of visits to each non-terminal state normalised to
/// one, propagated in topological order; terminal entries are zero.
pub fn visitation_distribution(mdp: &FiniteMdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    let n = mdp.num_states();
    if mdp.gamma() < 1.0 {
        if n > DENSE_STATE_BUDGET {
            return Err(Error::BudgetExceeded {
                required: n,
                budget: DENSE_STATE_BUDGET,
            });
        }
        let g = mdp.gamma();
        let p = policy_state_kernel(mdp, policy);
        let a = DMatrix::identity(n, n) - p.transpose() * g;
        let b = DVector::from_iterator(n, mdp.initial_distribution().iter().map(|m| (1.0 - g) * m));
        let d = a.lu().solve(&b).ok_or(Error::SingularSystem)?;
        return Ok(d.iter().copied().collect());
    }
    let order = mdp.topological_order().ok_or(Error::NotEpisodic)?;
    let mut visits: Vec<f64> = mdp
        .initial_distribution()
        .iter()
        .enumerate()
        .map(|(s, &m)| if mdp.is_terminal(s) { 0.0 } else { m })
        .collect();
    for &s in order {
        let mass = visits[s];
        if mass == 0.0 {
            continue;
        }
        for a in 0..mdp.num_actions() {
            let w = policy.prob(s, a) * mass;
            if w == 0.0 {
                continue;
            }
            for o in mdp.outcomes(s, a) {
                if !mdp.is_terminal(o.next) {
                    visits[o.next] += w * o.prob;
                }
            }
        }
    }
    let total: f64 = visits.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidMdp(
            "initial distribution has no non-terminal mass".into(),
        ));
    }
    Ok(visits.into_iter().map(|v| v / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn two_state_chain() -> FiniteMdp {
        FiniteMdp::new(
            2,
            1,
            vec![
                vec![Outcome {
                    next: 1,
                    prob: 1.0,
                    reward: 1.0,
                }],
                vec![],
            ],
            vec![false, true],
            1.0,
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_step() {
        let mdp = two_state_chain();
        let mut rng = seeded(0);
        assert_eq!(mdp.sample_step(0, 0, &mut rng).unwrap(), (1, 1.0, true));
    }

    #[test]
    fn stepping_from_terminal_is_an_error() {
        let mdp = two_state_chain();
        let mut rng = seeded(0);
        assert!(matches!(mdp.sample_step(1, 0, &mut rng), Err(Error::TerminalStep(1))));
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let r = FiniteMdp::new(
            1,
            1,
            vec![vec![Outcome {
                next: 0,
                prob: 0.9,
                reward: 0.0,
            }]],
            vec![false],
            0.5,
            vec![1.0],
        );
        assert!(r.is_err());
    }

    #[test]
    fn gamma_one_requires_acyclic_graph() {
        let r = FiniteMdp::new(
            1,
            1,
            vec![vec![Outcome {
                next: 0,
                prob: 1.0,
                reward: 1.0,
            }]],
            vec![false],
            1.0,
            vec![1.0],
        );
        assert!(matches!(r, Err(Error::NotEpisodic)));
    }

    #[test]
    fn single_state_visitation() {
        let mdp = FiniteMdp::new(
            1,
            1,
            vec![vec![Outcome {
                next: 0,
                prob: 1.0,
                reward: 1.0,
            }]],
            vec![false],
            0.5,
            vec![1.0],
        )
        .unwrap();
        let d = visitation_distribution(&mdp, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn episodic_chain_visitation() {
        let mdp = two_state_chain();
        let d = visitation_distribution(&mdp, &PolicyTable::uniform(2, 1)).unwrap();
        assert_eq!(d, vec![1.0, 0.0]);
        assert_eq!(mdp.horizon_bound(), Some(1));
    }

    #[test]
    fn rollout_records_behavior_log_probs() {
        let mdp = two_state_chain();
        let batch = rollout_batch(&mdp, &PolicyTable::uniform(2, 1), 3, 4, 10).unwrap();
        assert_eq!(batch.len(), 4);
        for t in &batch.trajectories {
            assert_eq!(t.len(), 1);
            assert_eq!(t.behavior_log_probs, vec![0.0]);
            assert!(t.reached_terminal());
        }
    }

    #[test]
    fn horizon_cap_stops_loops() {
        let mdp = FiniteMdp::new(
            1,
            1,
            vec![vec![Outcome {
                next: 0,
                prob: 1.0,
                reward: 1.0,
            }]],
            vec![false],
            0.9,
            vec![1.0],
        )
        .unwrap();
        let batch = rollout_batch(&mdp, &PolicyTable::uniform(1, 1), 0, 1, 7).unwrap();
        assert_eq!(batch.trajectories[0].len(), 7);
        assert_eq!(batch.trajectories[0].end, EpisodeEnd::HorizonCap);
    }
}
