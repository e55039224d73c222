//! Critic, actor and adversary losses with their analytic gradients.

use nalgebra::DMatrix;

use super::buffer::Transition;
use super::mlp::Mlp;

/// Protagonist, adversary, critic `Q(x, u, d)` and the critic's target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub actor: Mlp,
    pub adversary: Mlp,
    pub critic: Mlp,
    pub target_critic: Mlp,
}

/// `(1 - gamma) max{l, h} + gamma max{h, min{l, q}}`.
pub fn reach_avoid_backup(l: f64, h: f64, q: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * l.max(h) + gamma * h.max(l.min(q))
}

fn columns(batch: &[&Transition], f: impl Fn(&Transition) -> &[f64]) -> DMatrix<f64> {
    let rows = f(batch[0]).len();
    DMatrix::from_fn(rows, batch.len(), |r, c| f(batch[c])[r])
}

/// Stacks `[x; u; d]` column-wise.
pub fn critic_input(x: &DMatrix<f64>, u: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let (nx, nu, nd) = (x.nrows(), u.nrows(), d.nrows());
    let mut out = DMatrix::zeros(nx + nu + nd, x.ncols());
    out.rows_mut(0, nx).copy_from(x);
    out.rows_mut(nx, nu).copy_from(u);
    out.rows_mut(nx + nu, nd).copy_from(d);
    out
}

/// `Q(x, pi(x), mu(x))` under `critic`, one column per state.
pub fn policy_value(nets: &Nets, critic: &Mlp, x: &DMatrix<f64>) -> DMatrix<f64> {
    let u = nets.actor.predict(x);
    let d = nets.adversary.predict(x);
    critic.predict(&critic_input(x, &u, &d))
}

/// Bootstrapped target of every transition, using the target critic at the
/// successor state.
pub fn critic_targets(batch: &[&Transition], nets: &Nets, gamma: f64) -> Vec<f64> {
    let next = columns(batch, |t| &t.next);
    let q = policy_value(nets, &nets.target_critic, &next);
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| reach_avoid_backup(t.l, t.h, q[(0, i)], gamma))
        .collect()
}

pub fn critic_target(t: &Transition, nets: &Nets, gamma: f64) -> f64 {
    critic_targets(&[t], nets, gamma)[0]
}

/// Mean squared error against the (detached) targets and its gradient with
/// respect to the critic parameters.
pub fn critic_loss(batch: &[&Transition], nets: &Nets, gamma: f64) -> (f64, Vec<f64>) {
    let targets = critic_targets(batch, nets, gamma);
    critic_loss_with_targets(batch, &nets.critic, &targets)
}

pub fn critic_loss_with_targets(batch: &[&Transition], critic: &Mlp, targets: &[f64]) -> (f64, Vec<f64>) {
    let input = critic_input(
        &columns(batch, |t| &t.x),
        &columns(batch, |t| &t.u),
        &columns(batch, |t| &t.d),
    );
    let (q, tape) = critic.forward(&input);
    let n = batch.len() as f64;
    let err = DMatrix::from_fn(1, batch.len(), |_, c| q[(0, c)] - targets[c]);
    let loss = err.iter().map(|e| e * e).sum::<f64>() / n;
    let (grad, _) = critic.backward(&tape, &(err * (2.0 / n)));
    (loss, grad)
}

/// `mean Q(x, pi(x), mu(x))` and the gradients of that mean with respect
/// to the actor and the adversary parameters, from one shared pass.
pub fn policy_gradients(batch: &[&Transition], nets: &Nets) -> (f64, Vec<f64>, Vec<f64>) {
    let x = columns(batch, |t| &t.x);
    let (u, tape_u) = nets.actor.forward(&x);
    let (d, tape_d) = nets.adversary.forward(&x);
    let (q, tape_q) = nets.critic.forward(&critic_input(&x, &u, &d));
    let n = batch.len() as f64;
    let loss = q.sum() / n;
    let dq = DMatrix::from_element(1, batch.len(), 1.0 / n);
    let (_, dinput) = nets.critic.backward(&tape_q, &dq);
    let (nx, nu, nd) = (x.nrows(), u.nrows(), d.nrows());
    let du = dinput.rows(nx, nu).into_owned();
    let dd = dinput.rows(nx + nu, nd).into_owned();
    let (g_actor, _) = nets.actor.backward(&tape_u, &du);
    let (g_adv, _) = nets.adversary.backward(&tape_d, &dd);
    (loss, g_actor, g_adv)
}

/// The protagonist minimizes the value: loss `mean Q`, gradient with respect
/// to the actor parameters.
pub fn actor_loss(batch: &[&Transition], nets: &Nets) -> (f64, Vec<f64>) {
    let (loss, g, _) = policy_gradients(batch, nets);
    (loss, g)
}

/// The adversary maximizes it: loss `-mean Q`, gradient with respect to the
/// adversary parameters.
pub fn adversary_loss(batch: &[&Transition], nets: &Nets) -> (f64, Vec<f64>) {
    let (loss, _, g) = policy_gradients(batch, nets);
    (-loss, g.into_iter().map(|v| -v).collect())
}
