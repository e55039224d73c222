//! The adversarial actor-critic training loop.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, Transition};
use super::losses::{critic_loss_with_targets, critic_targets, policy_gradients, policy_value, Nets};
use super::mlp::{Head, Mlp};
use crate::error::{Error, Result};
use crate::grid::{lattice, csv_err};
use crate::model::{sample_polytope, ConstraintSets, DisturbedModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Momentum { momentum: 0.9 }
    }
}

/// First-order optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Momentum { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= self.lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Learning rate.
    pub eta: f64,
    /// Target smoothing coefficient.
    pub tau: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    /// Exploration noise standard deviation as a fraction of the box
    /// half-width; decays linearly to zero over training.
    pub noise_scale: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub buffer_capacity: usize,
    /// Environment steps before the first gradient step.
    pub warmup_steps: usize,
    pub episode_len: usize,
    /// Probe grid `[n_x1, n_x2, ...]` for the per-epoch `Q < 0` fraction.
    pub probe_shape: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            eta: 1e-3,
            tau: 0.005,
            batch_size: 128,
            steps_per_epoch: 1000,
            epochs: 60,
            noise_scale: 0.1,
            seed: 0,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::default(),
            buffer_capacity: 200_000,
            warmup_steps: 1000,
            episode_len: 200,
            probe_shape: vec![40, 60],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.episode_len == 0 {
            return Err(Error::Config("batch size, epoch length and episode length must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise scale must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub episodes: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub adversary_loss: f64,
    pub probe_fraction: f64,
}

pub fn write_log_csv<W: Write>(log: &[EpochLog], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in log {
        wr.serialize(row).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_log_csv<R: Read>(r: R) -> Result<Vec<EpochLog>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                row: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub nets: Nets,
    pub log: Vec<EpochLog>,
}

/// Fresh networks for `model` and `sets`.
pub fn init_nets<R: Rng>(
    model: &DisturbedModel,
    sets: &ConstraintSets,
    hidden: &[usize],
    rng: &mut R,
) -> Result<Nets> {
    let (nx, nu, nd) = (model.state_dim(), model.input_dim(), model.disturbance_dim());
    let (xl, xh) = sets.state.bounding_box()?;
    let (ul, uh) = sets.input.bounding_box()?;
    let (dl, dh) = sets.disturbance.bounding_box()?;
    let sizes = |n_in: usize, n_out: usize| {
        let mut s = vec![n_in];
        s.extend_from_slice(hidden);
        s.push(n_out);
        s
    };
    let actor = Mlp::new(&sizes(nx, nu), Head::Squash, (&xl, &xh), Some((&ul, &uh)), rng)?;
    let adversary = Mlp::new(&sizes(nx, nd), Head::Squash, (&xl, &xh), Some((&dl, &dh)), rng)?;
    let cl: Vec<f64> = xl.iter().chain(&ul).chain(&dl).copied().collect();
    let ch: Vec<f64> = xh.iter().chain(&uh).chain(&dh).copied().collect();
    let mut critic = Mlp::new(&sizes(nx + nu + nd, 1), Head::Identity, (&cl, &ch), None, rng)?;
    // Start pessimistic, like value iteration from max{l, h}: both margins
    // are convex, so their maximum over X sits at a vertex.
    let top = sets
        .state
        .vertices()?
        .iter()
        .map(|v| sets.l_margin(v).max(sets.h_margin(v)))
        .fold(f64::NEG_INFINITY, f64::max);
    let n = critic.num_params();
    critic.params_mut()[n - 1] = top;
    let target_critic = critic.clone();
    Ok(Nets {
        actor,
        adversary,
        critic,
        target_critic,
    })
}

/// Fraction of probe states with `Q(x, pi(x), mu(x)) < 0`.
pub fn probe_fraction(nets: &Nets, probe: &DMatrix<f64>) -> f64 {
    let q = policy_value(nets, &nets.critic, probe);
    q.iter().filter(|v| **v < 0.0).count() as f64 / q.ncols().max(1) as f64
}

/// Probe states: a lattice over the bounding box of `X`.
pub fn probe_states(sets: &ConstraintSets, shape: &[usize]) -> Result<DMatrix<f64>> {
    let (lo, hi) = sets.state.bounding_box()?;
    if shape.len() != lo.len() {
        return Err(Error::Config("probe shape does not match the state dimension".into()));
    }
    let mut pts = vec![Vec::new()];
    for (a, (l, h)) in lo.iter().zip(&hi).enumerate() {
        let axis = lattice(&[*l], &[*h], shape[a]);
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v[0]);
                    q
                })
            })
            .collect();
    }
    Ok(DMatrix::from_fn(lo.len(), pts.len(), |r, c| pts[c][r]))
}

fn noisy<R: Rng>(center: &[f64], lo: &[f64], hi: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(c, (l, h))| {
            let sd = scale * 0.5 * (h - l);
            let n = if sd > 0.0 {
                Normal::new(0.0, sd).map(|d| d.sample(rng)).unwrap_or(0.0)
            } else {
                0.0
            };
            (c + n).clamp(*l, *h)
        })
        .collect()
}

/// Trains from scratch; `on_epoch` sees every epoch's log and networks.
pub fn train(
    model: &DisturbedModel,
    sets: &ConstraintSets,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Nets),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = init_nets(model, sets, &cfg.hidden, &mut rng)?;
    let (ul, uh) = sets.input.bounding_box()?;
    let (dl, dh) = sets.disturbance.bounding_box()?;
    let probe = probe_states(sets, &cfg.probe_shape)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut opt_c = Optimizer::new(cfg.optimizer, cfg.eta, nets.critic.num_params());
    let mut opt_a = Optimizer::new(cfg.optimizer, cfg.eta, nets.actor.num_params());
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.eta, nets.adversary.num_params());
    let total = cfg.total_steps().max(1) as f64;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut x = sample_polytope(&sets.state, &mut rng);
    let mut ep_len = 0;
    let mut episodes = 1;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut sum_c, mut sum_a, mut sum_d, mut updates) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..cfg.steps_per_epoch {
            let scale = cfg.noise_scale * (1.0 - step as f64 / total);
            let u = noisy(&nets.actor.eval(&x), &ul, &uh, scale, &mut rng);
            let d = noisy(&nets.adversary.eval(&x), &dl, &dh, scale, &mut rng);
            match model.step_disturbed(&x, &u, &d) {
                Ok(next) => {
                    let next: Vec<f64> = next.iter().copied().collect();
                    let out = sets.h_margin(&next) > 0.0;
                    buffer.push(Transition {
                        h: sets.h_margin(&x),
                        l: sets.l_margin(&x),
                        x: std::mem::take(&mut x),
                        u,
                        d,
                        next: next.clone(),
                    });
                    ep_len += 1;
                    if out || ep_len >= cfg.episode_len {
                        x = sample_polytope(&sets.state, &mut rng);
                        ep_len = 0;
                        episodes += 1;
                    } else {
                        x = next;
                    }
                }
                Err(_) => {
                    x = sample_polytope(&sets.state, &mut rng);
                    ep_len = 0;
                    episodes += 1;
                }
            }
            step += 1;
            if buffer.len() < cfg.warmup_steps.max(cfg.batch_size) {
                continue;
            }
            let batch = buffer.sample(cfg.batch_size, &mut rng);
            let targets = critic_targets(&batch, &nets, cfg.gamma);
            let (lc, gc) = critic_loss_with_targets(&batch, &nets.critic, &targets);
            if !lc.is_finite() || lc > 1e6 {
                return Err(Error::Diverged {
                    step,
                    detail: format!("critic loss {lc:e} at epoch {epoch}"),
                });
            }
            opt_c.step(nets.critic.params_mut(), &gc);
            let (la, ga, gd) = policy_gradients(&batch, &nets);
            opt_a.step(nets.actor.params_mut(), &ga);
            opt_d.step(nets.adversary.params_mut(), &gd);
            nets.target_critic.soft_update_from(&nets.critic, cfg.tau);
            sum_c += lc;
            sum_a += la;
            sum_d -= la;
            updates += 1;
        }
        let n = updates.max(1) as f64;
        let entry = EpochLog {
            epoch,
            steps: step,
            episodes,
            critic_loss: sum_c / n,
            actor_loss: sum_a / n,
            adversary_loss: sum_d / n,
            probe_fraction: probe_fraction(&nets, &probe),
        };
        on_epoch(&entry, &nets);
        log.push(entry);
    }
    Ok(TrainOutput { nets, log })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w.max(1));
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

const CKPT_MAGIC: &[u8; 8] = b"RACKPT01";

/// Magic `RACKPT01` followed by the actor, adversary, critic and target
/// critic in the single-network layout.
pub fn write_checkpoint<W: Write>(nets: &Nets, mut w: W) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    for n in [&nets.actor, &nets.adversary, &nets.critic, &nets.target_critic] {
        n.write_binary(&mut w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Nets> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    Ok(Nets {
        actor: Mlp::read_binary(&mut r)?,
        adversary: Mlp::read_binary(&mut r)?,
        critic: Mlp::read_binary(&mut r)?,
        target_critic: Mlp::read_binary(&mut r)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pendulum_problem, Pendulum};

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            steps_per_epoch: 300,
            epochs: 2,
            warmup_steps: 200,
            batch_size: 32,
            hidden: vec![8, 8],
            seed,
            probe_shape: vec![5, 5],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let a = train(&m, &sets, &quick_cfg(11), |_, _| {}).unwrap();
        let b = train(&m, &sets, &quick_cfg(11), |_, _| {}).unwrap();
        assert_eq!(a.nets, b.nets);
        assert_eq!(a.log, b.log);
        let c = train(&m, &sets, &quick_cfg(12), |_, _| {}).unwrap();
        assert_ne!(a.nets, c.nets);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
        for cfg in [
            TrainConfig { gamma: 1.0, ..quick_cfg(0) },
            TrainConfig { tau: 0.0, ..quick_cfg(0) },
            TrainConfig { eta: -1.0, ..quick_cfg(0) },
        ] {
            assert!(matches!(train(&m, &sets, &cfg, |_, _| {}), Err(Error::Config(_))));
        }
    }

    #[test]
    fn divergence_is_detected() {
        let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let cfg = TrainConfig { eta: 1e6, ..quick_cfg(1) };
        assert!(matches!(train(&m, &sets, &cfg, |_, _| {}), Err(Error::Diverged { .. })));
    }

    #[test]
    fn checkpoint_and_log_round_trip() {
        let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let out = train(&m, &sets, &quick_cfg(3), |_, _| {}).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&out.nets, &mut buf).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), out.nets);
        let mut csv = Vec::new();
        write_log_csv(&out.log, &mut csv).unwrap();
        assert!(String::from_utf8_lossy(&csv).starts_with("epoch,steps,episodes,critic_loss"));
        assert_eq!(read_log_csv(&csv[..]).unwrap(), out.log);
    }

    #[test]
    fn adam_and_momentum_steps() {
        let mut p = vec![1.0, -1.0];
        let mut sgd = Optimizer::new(OptimizerKind::Momentum { momentum: 0.9 }, 0.1, 2);
        sgd.step(&mut p, &[1.0, 2.0]);
        sgd.step(&mut p, &[1.0, 2.0]);
        assert!((p[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
        let mut q = vec![0.0];
        let mut adam = Optimizer::new(
            OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            0.01,
            1,
        );
        adam.step(&mut q, &[5.0]);
        assert!((q[0] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
    }
}
