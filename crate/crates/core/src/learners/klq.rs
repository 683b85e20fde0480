//! The KLQ ℓ² loss on λ-return targets.

use crate::error::{Error, Result};
use crate::learners::params::{apply_gradient, Gradient, ParamState};
use crate::learners::StepRecord;

/// `mean_t (τ log(π_θ(a_t|s_t)/π_b(a_t|s_t)) + V_θ(s_t) − Ĝ_t)²` and its
/// gradient.
pub fn klq_loss_and_grad(params: &ParamState, steps: &[StepRecord], tau: f64) -> Result<(f64, Gradient)> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    let pi = params.policy()?;
    let n = steps.len() as f64;
    let mut loss = 0.0;
    let mut grad = Gradient::zeros_like(params);
    for st in steps {
        let q = tau * (pi.log_prob(st.state, st.action) - st.ref_log_prob) + params.values[st.state];
        let e = q - st.target;
        loss += e * e;
        grad.values[st.state] += 2.0 * e / n;
        grad.add_log_prob_grad(&pi, st.state, st.action, 2.0 * e * tau / n);
    }
    let loss = loss / n;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!("KLQ loss {loss}")));
    }
    Ok((loss, grad))
}

/// KLQ loss without the gradient.
pub fn klq_loss(params: &ParamState, steps: &[StepRecord], tau: f64) -> Result<f64> {
    klq_loss_and_grad(params, steps, tau).map(|(l, _)| l)
}

/// One gradient step on a minibatch. Returns the loss before the step, or
/// after it when `post_step_loss` is set.
pub fn klq_minibatch_update(
    params: &ParamState,
    steps: &[StepRecord],
    tau: f64,
    lr: f64,
    policy_lr_scale: f64,
    post_step_loss: bool,
) -> Result<(ParamState, f64)> {
    let (loss, grad) = klq_loss_and_grad(params, steps, tau)?;
    let mut next = params.clone();
    apply_gradient(&mut next, &grad, lr, policy_lr_scale)?;
    let reported = if post_step_loss {
        klq_loss(&next, steps, tau)?
    } else {
        loss
    };
    Ok((next, reported))
}
