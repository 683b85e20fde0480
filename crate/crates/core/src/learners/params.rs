//! Tabular softmax policy with a value head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tables::{PolicyTable, QTable, VTable};

/// Trainable parameters: `π_θ(·|s) = softmax(logits(s, ·))` and `V_θ(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    num_states: usize,
    num_actions: usize,
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
}

/// How the value head starts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ValueInit {
    #[default]
    Zeros,
    /// Uniform in `[−scale, scale]`.
    Random { scale: f64, seed: u64 },
}

impl ParamState {
    /// Logits `log π_b`, so that `π_θ = π_b` exactly up to rounding.
    pub fn from_reference(pi_b: &PolicyTable, init: ValueInit) -> Result<Self> {
        let (ns, na) = (pi_b.num_states(), pi_b.num_actions());
        let mut logits = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let l = pi_b.log_prob(s, a);
                if !l.is_finite() {
                    return Err(Error::SupportViolation {
                        state: s,
                        action: a,
                        detail: "reference policy needs full support to initialise logits",
                    });
                }
                logits.push(l);
            }
        }
        let values = match init {
            ValueInit::Zeros => vec![0.0; ns],
            ValueInit::Random { scale, seed } => {
                let mut rng = seeded(seed);
                (0..ns).map(|_| rng.random_range(-scale..=scale)).collect()
            }
        };
        Ok(Self {
            num_states: ns,
            num_actions: na,
            logits,
            values,
        })
    }

    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if logits.len() != num_states * num_actions || values.len() != num_states {
            return Err(Error::InvalidArgument("parameter sizes do not match".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn policy(&self) -> Result<PolicyTable> {
        PolicyTable::from_logits(self.num_states, self.num_actions, &self.logits)
    }

    pub fn value_table(&self) -> Result<VTable> {
        VTable::from_values(self.values.clone())
    }

    /// `Q_θ(s,a) = τ log(π_θ(a|s)/π_b(a|s)) + V_θ(s)` over every pair.
    pub fn q_table(&self, pi_b: &PolicyTable, tau: f64) -> Result<QTable> {
        let pi = self.policy()?;
        crate::soft::q_from_pi_v(&pi, &self.value_table()?, pi_b, tau)
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().chain(&self.values).all(|x| x.is_finite())
    }
}

/// Dense gradient with respect to `(logits, values)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub logits: Vec<f64>,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(p: &ParamState) -> Self {
        Self {
            logits: vec![0.0; p.logits.len()],
            values: vec![0.0; p.values.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().chain(&self.values).all(|x| x.is_finite())
    }

    pub fn sup_norm(&self) -> f64 {
        self.logits.iter().chain(&self.values).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Adds `w · ∂ log π_θ(a|s) / ∂ logits(s, ·) = w (e_a − π_θ(·|s))`.
    pub(crate) fn add_log_prob_grad(&mut self, pi: &PolicyTable, s: usize, a: usize, w: f64) {
        let na = pi.num_actions();
        for (b, p) in pi.row(s).iter().enumerate() {
            let ind = if a == b { 1.0 } else { 0.0 };
            self.logits[s * na + b] += w * (ind - p);
        }
    }
}

/// Plain gradient step: logits move by `lr · policy_lr_scale`, values by `lr`.
pub fn apply_gradient(params: &mut ParamState, grad: &Gradient, lr: f64, policy_lr_scale: f64) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let lp = lr * policy_lr_scale;
    for (x, g) in params.logits.iter_mut().zip(&grad.logits) {
        *x -= lp * g;
    }
    for (x, g) in params.values.iter_mut().zip(&grad.values) {
        *x -= lr * g;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}
