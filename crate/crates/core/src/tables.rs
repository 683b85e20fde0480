//! Tabular policies and value functions.
//!
//! All tables are dense and indexed by every state of the MDP, terminal
//! states included. Terminal rows of a [`QTable`] and terminal entries of a
//! [`VTable`] are zero by convention; terminal rows of a [`PolicyTable`] are
//! kept as valid distributions but never consulted.

use crate::error::{Error, Result};

/// Row-sum tolerance for probability vectors.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Support floor applied to reference policies.
pub const SUPPORT_FLOOR: f64 = 1e-12;

/// Stochastic policy `π(a|s)` stored row-major, optionally with exact
/// log-probabilities.
///
/// When log-probabilities are present they are authoritative for every
/// log-ratio computation, which keeps `τ·log(π/π_b)` exact even where the
/// probability itself underflows.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
    log_probs: Option<Vec<f64>>,
}

impl PolicyTable {
    pub fn from_probs(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidPolicy("empty policy table".into()));
        }
        if probs.len() != num_states * num_actions {
            return Err(Error::InvalidPolicy(format!(
                "expected {} entries, got {}",
                num_states * num_actions,
                probs.len()
            )));
        }
        let table = Self {
            num_states,
            num_actions,
            probs,
            log_probs: None,
        };
        table.validate()?;
        Ok(table)
    }

    /// Builds a policy from per-row log-probabilities (already normalised up
    /// to rounding). Probabilities are `exp(log_prob)`.
    pub fn from_log_probs(num_states: usize, num_actions: usize, log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.len() != num_states * num_actions {
            return Err(Error::InvalidPolicy("log-prob table has wrong size".into()));
        }
        if log_probs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::NonFinite("log-probability".into()));
        }
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        let table = Self {
            num_states,
            num_actions,
            probs,
            log_probs: Some(log_probs),
        };
        table.validate()?;
        Ok(table)
    }

    /// Softmax of per-row logits, with log-probabilities retained.
    pub fn from_logits(num_states: usize, num_actions: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != num_states * num_actions {
            return Err(Error::InvalidPolicy("logit table has wrong size".into()));
        }
        let mut log_probs = vec![0.0; logits.len()];
        for s in 0..num_states {
            let row = &logits[s * num_actions..(s + 1) * num_actions];
            let lse = log_sum_exp(row);
            if !lse.is_finite() {
                return Err(Error::NonFinite(format!("logits at state {s}")));
            }
            for (a, z) in row.iter().enumerate() {
                log_probs[s * num_actions + a] = z - lse;
            }
        }
        Self::from_log_probs(num_states, num_actions, log_probs)
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self {
            num_states,
            num_actions,
            probs: vec![p; num_states * num_actions],
            log_probs: None,
        }
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.num_states {
            let row = self.row(s);
            let mut sum = 0.0;
            for (a, &p) in row.iter().enumerate() {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::InvalidPolicy(format!("entry ({s},{a}) = {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL * self.num_actions.max(1) as f64 {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Raises every entry to at least `floor` and renormalises each row.
    pub fn floored(&self, floor: f64) -> Self {
        let mut probs = self.probs.clone();
        for row in probs.chunks_mut(self.num_actions) {
            for p in row.iter_mut() {
                *p = p.max(floor);
            }
            let sum: f64 = row.iter().sum();
            for p in row.iter_mut() {
                *p /= sum;
            }
        }
        Self {
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs,
            log_probs: None,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    /// `log π(a|s)`; `-inf` for zero-probability actions.
    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        let i = s * self.num_actions + a;
        match &self.log_probs {
            Some(l) => l[i],
            None => self.probs[i].ln(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn has_log_probs(&self) -> bool {
        self.log_probs.is_some()
    }

    /// Smallest probability over the given states.
    pub fn min_prob_over(&self, states: impl Iterator<Item = usize>) -> f64 {
        states
            .flat_map(|s| self.row(s).iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Total-variation distance between rows `s` of two policies.
    pub fn tv_at(&self, other: &PolicyTable, s: usize) -> f64 {
        0.5 * self
            .row(s)
            .iter()
            .zip(other.row(s))
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
    }

    pub fn same_shape(&self, other: &PolicyTable) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions
    }
}

/// Action values `Q(s,a)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn from_values(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::InvalidArgument(format!(
                "Q table needs {} entries, got {}",
                num_states * num_actions,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Q entry {i}")));
        }
        Ok(Self {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.num_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `‖self − other‖∞`.
    pub fn sup_dist(&self, other: &QTable) -> f64 {
        sup_dist(&self.values, &other.values)
    }

    pub fn zero_rows(&mut self, terminal: &[bool]) {
        for (s, &t) in terminal.iter().enumerate() {
            if t {
                self.row_mut(s).fill(0.0);
            }
        }
    }
}

/// State values `V(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    values: Vec<f64>,
}

impl VTable {
    pub fn zeros(num_states: usize) -> Self {
        Self {
            values: vec![0.0; num_states],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("V entry {i}")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn set(&mut self, s: usize, v: f64) {
        self.values[s] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_dist(&self, other: &VTable) -> f64 {
        sup_dist(&self.values, &other.values)
    }
}

pub(crate) fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max-shifted `log Σ exp(x)`; `-inf` for an empty or all-`-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
