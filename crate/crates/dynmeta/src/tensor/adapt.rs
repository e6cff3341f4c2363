//! Inner-loop adaptation with differentiable (second-order) or detached
//! (first-order) unrolling.
//!
//! The exact mode records each θ ← θ − α·∇L step on the live tape, then
//! differentiates the post-adaptation loss back to the *pre*-adaptation
//! parameters, which includes the Hessian-vector terms. The first-order mode
//! detaches the adapted parameters and returns the gradient evaluated at
//! them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TapedParams, Var};
use crate::tensor::{GradMap, ParamGroup};

/// Which parameter groups the inner loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// MAML-style: body and head both adapt.
    BodyAndHead,
    /// ANIL-style: only the head adapts.
    HeadOnly,
}

/// Exact second-order unrolling vs first-order approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradOrder {
    Exact,
    FirstOrder,
}

/// Which pre-adaptation parameters the outer gradient covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterWrt {
    BodyOnly,
    /// Body plus the (persistent) head, for static-head meta-learning.
    BodyAndHead,
}

/// Outcome of [`adapt_and_outer_grad`].
pub struct AdaptOutcome<E> {
    pub adapted_body: ParamGroup<E>,
    pub adapted_head: ParamGroup<E>,
    /// d(post-adaptation loss)/d(pre-adaptation parameters) in exact mode,
    /// or the gradient at the adapted parameters in first-order mode; keyed
    /// by parameter name, covering the groups selected by [`OuterWrt`].
    pub outer_grad: GradMap<E>,
    /// Loss evaluated at the adapted parameters.
    pub outer_loss: E,
}

/// One differentiable SGD step over the selected vars: θ' = θ − α·∇loss.
fn step_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    loss: Var,
    updated: &[Var],
    alpha: E,
) -> Result<Vec<Var>> {
    let grads = tape.grad_vars(loss, updated)?;
    let mut next = Vec::with_capacity(updated.len());
    for (&theta, g) in updated.iter().zip(grads) {
        let scaled = tape.scale_const(g, alpha)?;
        next.push(tape.sub(theta, scaled)?);
    }
    Ok(next)
}

/// Run `steps` inner updates of the scoped parameters on the tape, keeping
/// the whole unrolling differentiable. Returns the adapted handles.
pub fn adapt_on_tape<E, F>(
    tape: &mut Tape<E>,
    body: &TapedParams,
    head: &TapedParams,
    steps: usize,
    alpha: E,
    scope: Scope,
    loss_fn: &F,
) -> Result<(TapedParams, TapedParams)>
where
    E: Scalar,
    F: Fn(&mut Tape<E>, &TapedParams, &TapedParams) -> Result<Var>,
{
    let mut cur_body = body.clone();
    let mut cur_head = head.clone();
    for _ in 0..steps {
        let loss = loss_fn(tape, &cur_body, &cur_head)?;
        match scope {
            Scope::BodyAndHead => {
                let all: Vec<Var> = cur_body
                    .vars()
                    .iter()
                    .chain(cur_head.vars())
                    .copied()
                    .collect();
                let next = step_on_tape(tape, loss, &all, alpha)?;
                let nb = next[..cur_body.len()].to_vec();
                let nh = next[cur_body.len()..].to_vec();
                cur_body = cur_body.rebound(nb);
                cur_head = cur_head.rebound(nh);
            }
            Scope::HeadOnly => {
                let next = step_on_tape(tape, loss, cur_head.vars(), alpha)?;
                cur_head = cur_head.rebound(next);
            }
        }
    }
    Ok((cur_body, cur_head))
}

/// Perform `steps` inner updates of `inner_fn` per the scope, evaluate
/// `outer_fn` at the adapted parameters, and return its gradient with
/// respect to the pre-adaptation parameters (exact) or the adapted
/// parameters (first order).
///
/// The loss builders receive the current parameter handles; `inner_fn` runs
/// once per inner step, `outer_fn` once. Passing the same closure for both
/// reproduces the "use the task batch for both" variant.
#[allow(clippy::too_many_arguments)]
pub fn adapt_and_outer_grad<E, F, G>(
    body: &ParamGroup<E>,
    head: &ParamGroup<E>,
    steps: usize,
    alpha: E,
    scope: Scope,
    order: GradOrder,
    outer_wrt: OuterWrt,
    inner_fn: F,
    outer_fn: G,
) -> Result<AdaptOutcome<E>>
where
    E: Scalar,
    F: Fn(&mut Tape<E>, &TapedParams, &TapedParams) -> Result<Var>,
    G: Fn(&mut Tape<E>, &TapedParams, &TapedParams) -> Result<Var>,
{
    if steps == 0 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    if alpha.to_f64() < 0.0 {
        return Err(Error::Argument("alpha must be nonnegative".into()));
    }
    match order {
        GradOrder::Exact => {
            let mut tape = Tape::new();
            let body0 = tape.param_group(body);
            let head0 = tape.param_group(head);
            let (bodyn, headn) =
                adapt_on_tape(&mut tape, &body0, &head0, steps, alpha, scope, &inner_fn)?;
            let outer = outer_fn(&mut tape, &bodyn, &headn)?;
            let outer_loss = tape.value(outer).item()?;
            let outer_grad = match outer_wrt {
                OuterWrt::BodyOnly => tape.grad_map(outer, &[&body0])?,
                OuterWrt::BodyAndHead => tape.grad_map(outer, &[&body0, &head0])?,
            };
            Ok(AdaptOutcome {
                adapted_body: tape.read_params(&bodyn, body)?,
                adapted_head: tape.read_params(&headn, head)?,
                outer_grad,
                outer_loss,
            })
        }
        GradOrder::FirstOrder => {
            // Detached unrolling: plain value updates, fresh tape per step.
            let mut cur_body = body.clone();
            let mut cur_head = head.clone();
            for _ in 0..steps {
                let mut tape = Tape::new();
                let b = tape.param_group(&cur_body);
                let h = tape.param_group(&cur_head);
                let loss = inner_fn(&mut tape, &b, &h)?;
                match scope {
                    Scope::BodyAndHead => {
                        let gb = tape.grad_map(loss, &[&b])?;
                        let gh = tape.grad_map(loss, &[&h])?;
                        cur_body = crate::tensor::sgd_update(&cur_body, &gb, alpha)?;
                        cur_head = crate::tensor::sgd_update(&cur_head, &gh, alpha)?;
                    }
                    Scope::HeadOnly => {
                        let gh = tape.grad_map(loss, &[&h])?;
                        cur_head = crate::tensor::sgd_update(&cur_head, &gh, alpha)?;
                    }
                }
            }
            let mut tape = Tape::new();
            let b = tape.param_group(&cur_body);
            let h = tape.param_group(&cur_head);
            let outer = outer_fn(&mut tape, &b, &h)?;
            let outer_loss = tape.value(outer).item()?;
            let outer_grad = match outer_wrt {
                OuterWrt::BodyOnly => tape.grad_map(outer, &[&b])?,
                OuterWrt::BodyAndHead => tape.grad_map(outer, &[&b, &h])?,
            };
            Ok(AdaptOutcome {
                adapted_body: cur_body,
                adapted_head: cur_head,
                outer_grad,
                outer_loss,
            })
        }
    }
}
