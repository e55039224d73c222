//! Disturbed discrete-time dynamics `x+ = f(x, u) + g(x, u) d`, constraint
//! sets, trajectory linearization and worst-case curvature bounds.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::polytope::Polytope;
use crate::sls::NominalTrajectory;

/// Central-difference step used wherever analytic Jacobians are unavailable.
pub const FD_STEP: f64 = 1e-6;

/// Continuous-time (or already discrete, see [`Integrator::Discrete`]) model
/// description. `drift` is the nominal vector field and `channel` the
/// `n_x x n_d` disturbance input matrix.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn disturbance_dim(&self) -> usize;

    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64>;

    fn channel(&self, x: &[f64], u: &[f64]) -> DMatrix<f64>;

    /// Analytic `(df/dx, df/du)` of `drift`, when available.
    fn drift_jacobian(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }

    /// Analytic row-stacked Jacobians of `channel`: row `i * n_d + c` holds
    /// the gradient of entry `(i, c)` with respect to `x` (resp. `u`).
    fn channel_jacobian(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrator {
    /// Classic fourth-order Runge-Kutta over `dt`; the disturbance channel is
    /// `dt * channel(x, u)` evaluated at the step's start.
    Rk4 { dt: f64 },
    /// `drift` and `channel` already define the discrete map.
    Discrete,
}

#[derive(Clone)]
pub struct DisturbedModel {
    name: String,
    dynamics: Arc<dyn Dynamics>,
    integrator: Integrator,
}

impl fmt::Debug for DisturbedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DisturbedModel")
            .field("name", &self.name)
            .field("n_x", &self.state_dim())
            .field("n_u", &self.input_dim())
            .field("n_d", &self.disturbance_dim())
            .field("integrator", &self.integrator)
            .finish()
    }
}

fn ensure_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow(format!("{what} produced a non-finite value")))
    }
}

fn axpy(a: f64, x: &DVector<f64>, y: &[f64]) -> Vec<f64> {
    y.iter().zip(x.iter()).map(|(yi, xi)| yi + a * xi).collect()
}

impl DisturbedModel {
    pub fn new(name: impl Into<String>, dynamics: Arc<dyn Dynamics>, integrator: Integrator) -> Self {
        Self {
            name: name.into(),
            dynamics,
            integrator,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.dynamics.disturbance_dim()
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    /// Discrete nominal map `f(x, u)`.
    pub fn step_nominal(&self, x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        let out = self.nominal_unchecked(x, u);
        ensure_finite(&out, "nominal step")?;
        Ok(out)
    }

    fn nominal_unchecked(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let dyn_ = &self.dynamics;
        match self.integrator {
            Integrator::Discrete => dyn_.drift(x, u),
            Integrator::Rk4 { dt } => {
                let k1 = dyn_.drift(x, u);
                let k2 = dyn_.drift(&axpy(0.5 * dt, &k1, x), u);
                let k3 = dyn_.drift(&axpy(0.5 * dt, &k2, x), u);
                let k4 = dyn_.drift(&axpy(dt, &k3, x), u);
                let incr = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
                DVector::from_column_slice(x) + incr
            }
        }
    }

    /// Discrete disturbance channel `g(x, u)`, `n_x x n_d`.
    pub fn channel(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        match self.integrator {
            Integrator::Discrete => self.dynamics.channel(x, u),
            Integrator::Rk4 { dt } => self.dynamics.channel(x, u) * dt,
        }
    }

    /// `F(x, u, d) = f(x, u) + g(x, u) d`.
    pub fn step_disturbed(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<DVector<f64>> {
        let out = self.nominal_unchecked(x, u) + self.channel(x, u) * DVector::from_column_slice(d);
        ensure_finite(&out, "disturbed step")?;
        Ok(out)
    }

    /// Jacobians `(df/dx, df/du)` of the discrete nominal map.
    pub fn nominal_jacobian(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let nx = self.state_dim();
        let nu = self.input_dim();
        match (self.integrator, self.dynamics.drift_jacobian(x, u)) {
            (Integrator::Discrete, Some(j)) => j,
            (Integrator::Rk4 { dt }, Some(_)) => self.rk4_jacobian(dt, x, u),
            _ => {
                let f = |xx: &[f64], uu: &[f64]| self.nominal_unchecked(xx, uu);
                let mut a = DMatrix::zeros(nx, nx);
                let mut b = DMatrix::zeros(nx, nu);
                for j in 0..nx {
                    let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                    xp[j] += FD_STEP;
                    xm[j] -= FD_STEP;
                    a.set_column(j, &((f(&xp, u) - f(&xm, u)) / (2.0 * FD_STEP)));
                }
                for j in 0..nu {
                    let (mut up, mut um) = (u.to_vec(), u.to_vec());
                    up[j] += FD_STEP;
                    um[j] -= FD_STEP;
                    b.set_column(j, &((f(x, &up) - f(x, &um)) / (2.0 * FD_STEP)));
                }
                (a, b)
            }
        }
    }

    /// Chain rule through the four RK4 stages.
    fn rk4_jacobian(&self, dt: f64, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let dyn_ = &self.dynamics;
        let nx = self.state_dim();
        let jac = |xx: &[f64]| dyn_.drift_jacobian(xx, u).expect("analytic drift jacobian");
        let eye = DMatrix::<f64>::identity(nx, nx);

        let k1 = dyn_.drift(x, u);
        let (j1x, j1u) = jac(x);
        let (dk1x, dk1u) = (j1x, j1u);

        let x2 = axpy(0.5 * dt, &k1, x);
        let k2 = dyn_.drift(&x2, u);
        let (j2x, j2u) = jac(&x2);
        let dk2x = &j2x * (&eye + &dk1x * (0.5 * dt));
        let dk2u = &j2x * &dk1u * (0.5 * dt) + j2u;

        let x3 = axpy(0.5 * dt, &k2, x);
        let k3 = dyn_.drift(&x3, u);
        let (j3x, j3u) = jac(&x3);
        let dk3x = &j3x * (&eye + &dk2x * (0.5 * dt));
        let dk3u = &j3x * &dk2u * (0.5 * dt) + j3u;

        let x4 = axpy(dt, &k3, x);
        let (j4x, j4u) = jac(&x4);
        let dk4x = &j4x * (&eye + &dk3x * dt);
        let dk4u = &j4x * &dk3u * dt + j4u;

        let a = &eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (dt / 6.0);
        let b = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (dt / 6.0);
        (a, b)
    }

    /// Row-stacked Jacobians `(A^g, B^g)` of the discrete channel, shapes
    /// `(n_x n_d) x n_x` and `(n_x n_d) x n_u`.
    pub fn channel_jacobian(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let scale = match self.integrator {
            Integrator::Discrete => 1.0,
            Integrator::Rk4 { dt } => dt,
        };
        if let Some((ax, bu)) = self.dynamics.channel_jacobian(x, u) {
            return (ax * scale, bu * scale);
        }
        let nx = self.state_dim();
        let nu = self.input_dim();
        let nd = self.disturbance_dim();
        let stack = |m: DMatrix<f64>| DVector::from_fn(nx * nd, |r, _| m[(r / nd, r % nd)]);
        let mut ag = DMatrix::zeros(nx * nd, nx);
        let mut bg = DMatrix::zeros(nx * nd, nu);
        for j in 0..nx {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[j] += FD_STEP;
            xm[j] -= FD_STEP;
            let diff = (self.channel(&xp, u) - self.channel(&xm, u)) / (2.0 * FD_STEP);
            ag.set_column(j, &stack(diff));
        }
        for j in 0..nu {
            let (mut up, mut um) = (u.to_vec(), u.to_vec());
            up[j] += FD_STEP;
            um[j] -= FD_STEP;
            let diff = (self.channel(x, &up) - self.channel(x, &um)) / (2.0 * FD_STEP);
            bg.set_column(j, &stack(diff));
        }
        (ag, bg)
    }

    /// Linearization of `F` around `(z, v)` evaluated at `(x, u, d)`; returns
    /// the remainder `F(x,u,d) - [f(z,v) + A^f dx + B^f du + g(z,v) d +
    /// (I (x) d^T)(A^g dx + B^g du)]`.
    pub fn linearization_remainder(
        &self,
        z: &[f64],
        v: &[f64],
        x: &[f64],
        u: &[f64],
        d: &[f64],
    ) -> DVector<f64> {
        let lin = self.linearize_at(z, v);
        lin.remainder(self, z, v, x, u, d)
    }

    pub fn linearize_at(&self, z: &[f64], v: &[f64]) -> PointLinearization {
        let (af, bf) = self.nominal_jacobian(z, v);
        let (ag, bg) = self.channel_jacobian(z, v);
        PointLinearization {
            f: self.nominal_unchecked(z, v),
            g: self.channel(z, v),
            af,
            bf,
            ag,
            bg,
        }
    }
}

/// Jacobian data at a single nominal point.
#[derive(Debug, Clone)]
pub struct PointLinearization {
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub af: DMatrix<f64>,
    pub bf: DMatrix<f64>,
    pub ag: DMatrix<f64>,
    pub bg: DMatrix<f64>,
}

/// `(I_{n_x} (x) d^T) M` for a row-stacked `(n_x n_d) x k` matrix `M`.
pub fn contract_disturbance(m: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let nd = d.len();
    let nx = m.nrows() / nd;
    DMatrix::from_fn(nx, m.ncols(), |i, j| {
        (0..nd).map(|c| d[c] * m[(i * nd + c, j)]).sum()
    })
}

impl PointLinearization {
    fn remainder(
        &self,
        model: &DisturbedModel,
        z: &[f64],
        v: &[f64],
        x: &[f64],
        u: &[f64],
        d: &[f64],
    ) -> DVector<f64> {
        let dx = DVector::from_column_slice(x) - DVector::from_column_slice(z);
        let du = DVector::from_column_slice(u) - DVector::from_column_slice(v);
        let dd = DVector::from_column_slice(d);
        let actual = model.nominal_unchecked(x, u) + model.channel(x, u) * &dd;
        let first_order = &self.f
            + &self.af * &dx
            + &self.bf * &du
            + &self.g * &dd
            + contract_disturbance(&self.ag, d) * &dx
            + contract_disturbance(&self.bg, d) * &du;
        actual - first_order
    }
}

/// Per-step Jacobians along a nominal trajectory plus the curvature bound.
#[derive(Debug, Clone)]
pub struct LinearizationBundle {
    pub af: Vec<DMatrix<f64>>,
    pub bf: Vec<DMatrix<f64>>,
    pub ag: Vec<DMatrix<f64>>,
    pub bg: Vec<DMatrix<f64>>,
    /// Discrete channel `g(z_k, v_k)` at each step.
    pub g: Vec<DMatrix<f64>>,
    pub mu: Option<Vec<f64>>,
}

impl LinearizationBundle {
    pub fn horizon(&self) -> usize {
        self.af.len()
    }
}

/// The four constraint sets of a reach-avoid problem.
#[derive(Debug, Clone)]
pub struct ConstraintSets {
    pub state: Polytope,
    pub input: Polytope,
    pub disturbance: Polytope,
    pub target: Polytope,
}

impl ConstraintSets {
    /// Avoid margin `h(x) = max_i (H_x x - h_x)_i`.
    pub fn h_margin(&self, x: &[f64]) -> f64 {
        self.state.margin(x)
    }

    /// Target margin `l(x) = max_i (R_x x - r_x)_i`.
    pub fn l_margin(&self, x: &[f64]) -> f64 {
        self.target.margin(x)
    }

    pub fn validate(&self, model: &DisturbedModel) -> Result<()> {
        let dims = [
            ("state", &self.state, model.state_dim()),
            ("input", &self.input, model.input_dim()),
            ("disturbance", &self.disturbance, model.disturbance_dim()),
            ("target", &self.target, model.state_dim()),
        ];
        for (name, set, n) in dims {
            if set.dim() != n {
                return Err(Error::Dimension(format!(
                    "{name} set has dimension {}, model expects {n}",
                    set.dim()
                )));
            }
            if set.vertices()?.is_empty() {
                return Err(Error::Empty);
            }
        }
        Ok(())
    }
}

/// Linearizes `f` and `g` at every `(z_k, v_k)`, `k = 0..T-1`. Steps
/// `1..T-1` (the ones whose Jacobians enter the tube program) must lie in
/// `X x U`, where the curvature bound is valid.
pub fn linearize_trajectory(
    model: &DisturbedModel,
    sets: &ConstraintSets,
    traj: &NominalTrajectory,
    mu: Option<&[f64]>,
) -> Result<LinearizationBundle> {
    let t = traj.horizon();
    let mut bundle = LinearizationBundle {
        af: Vec::with_capacity(t),
        bf: Vec::with_capacity(t),
        ag: Vec::with_capacity(t),
        bg: Vec::with_capacity(t),
        g: Vec::with_capacity(t),
        mu: mu.map(<[f64]>::to_vec),
    };
    for k in 0..t {
        let z = traj.state(k);
        let v = traj.input(k);
        if k >= 1 {
            if !sets.state.contains(z, 1e-9) {
                return Err(Error::Domain(format!("nominal state z_{k} lies outside X")));
            }
            if !sets.input.contains(v, 1e-9) {
                return Err(Error::Domain(format!("nominal input v_{k} lies outside U")));
            }
        }
        let lin = model.linearize_at(z, v);
        bundle.af.push(lin.af);
        bundle.bf.push(lin.bf);
        bundle.ag.push(lin.ag);
        bundle.bg.push(lin.bg);
        bundle.g.push(lin.g);
    }
    Ok(bundle)
}

#[derive(Debug, Clone, Copy)]
pub struct CurvatureOptions {
    pub samples: usize,
    pub inflation: f64,
    pub seed: u64,
}

impl Default for CurvatureOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            inflation: 1.5,
            seed: 0x5eed,
        }
    }
}

/// Uniform sample from a polytope by rejection from its bounding box.
pub fn sample_polytope<R: Rng>(p: &Polytope, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = p.bounding_box().expect("bounded polytope");
    loop {
        let x: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { rng.gen_range(*l..=*h) } else { *l })
            .collect();
        if p.contains(&x, 0.0) {
            return x;
        }
    }
}

fn perturb_into<R: Rng>(p: &Polytope, center: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = p.bounding_box().expect("bounded polytope");
    for _ in 0..64 {
        let x: Vec<f64> = center
            .iter()
            .enumerate()
            .map(|(j, c)| c + scale * (hi[j] - lo[j]) * rng.gen_range(-1.0..=1.0))
            .collect();
        if p.contains(&x, 0.0) {
            return x;
        }
    }
    center.to_vec()
}

/// Sampled worst-case curvature ratio `max |r_i| / ||e||_inf^2`, inflated.
///
/// Half the samples pair independent uniform draws of `(z, v)` and `(x, u)`;
/// the other half perturb `(z, v)` at log-uniform scales so that the
/// small-deviation (second-derivative) regime is covered as well.
pub fn curvature_bounds(
    model: &DisturbedModel,
    sets: &ConstraintSets,
    opts: &CurvatureOptions,
) -> Vec<f64> {
    let nx = model.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d_vertices = sets.disturbance.vertices().unwrap_or_default();
    let mut worst = vec![0.0f64; nx];
    for s in 0..opts.samples {
        let z = sample_polytope(&sets.state, &mut rng);
        let v = sample_polytope(&sets.input, &mut rng);
        let (x, u) = if s % 2 == 0 {
            (
                sample_polytope(&sets.state, &mut rng),
                sample_polytope(&sets.input, &mut rng),
            )
        } else {
            let scale = 10f64.powf(rng.gen_range(-3.0..0.0));
            (
                perturb_into(&sets.state, &z, scale, &mut rng),
                perturb_into(&sets.input, &v, scale, &mut rng),
            )
        };
        let d = if !d_vertices.is_empty() && s % 4 < 2 {
            d_vertices[rng.gen_range(0..d_vertices.len())].clone()
        } else {
            sample_polytope(&sets.disturbance, &mut rng)
        };
        let e_inf = x
            .iter()
            .zip(&z)
            .chain(u.iter().zip(&v))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if e_inf < 1e-3 {
            continue;
        }
        let lin = model.linearize_at(&z, &v);
        let r = lin.remainder(model, &z, &v, &x, &u, &d);
        let next = model.nominal_unchecked(&x, &u);
        for i in 0..nx {
            // ignore rounding noise so that affine models report zero curvature
            let noise = 64.0 * f64::EPSILON * (1.0 + next[i].abs() + lin.f[i].abs());
            if r[i].abs() > noise {
                worst[i] = worst[i].max(r[i].abs() / (e_inf * e_inf));
            }
        }
    }
    worst.iter().map(|w| w * opts.inflation).collect()
}

/// Inverted pendulum `x1' = x2`, `x2' = 3g/(2l) sin x1 + 3/(m l^2) u`, with
/// disturbance input `[d1, d2 + d3 u]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pendulum {
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            length: 1.0,
            mass: 1.0,
        }
    }
}

impl Pendulum {
    fn stiffness(&self) -> f64 {
        1.5 * self.gravity / self.length
    }

    fn input_gain(&self) -> f64 {
        3.0 / (self.mass * self.length * self.length)
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn disturbance_dim(&self) -> usize {
        3
    }

    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![
            x[1],
            self.stiffness() * x[0].sin() + self.input_gain() * u[0],
        ])
    }

    fn channel(&self, _x: &[f64], u: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, u[0]])
    }

    fn drift_jacobian(&self, x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, self.stiffness() * x[0].cos(), 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, self.input_gain()]),
        ))
    }

    fn channel_jacobian(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let ag = DMatrix::zeros(6, 2);
        let mut bg = DMatrix::zeros(6, 1);
        bg[(5, 0)] = 1.0;
        Some((ag, bg))
    }
}

/// `x+ = A x + B u + G d` (use with [`Integrator::Discrete`]).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl Dynamics for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn disturbance_dim(&self) -> usize {
        self.g.ncols()
    }

    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x) + &self.b * DVector::from_column_slice(u)
    }

    fn channel(&self, _x: &[f64], _u: &[f64]) -> DMatrix<f64> {
        self.g.clone()
    }

    fn drift_jacobian(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }

    fn channel_jacobian(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let rows = self.state_dim() * self.disturbance_dim();
        Some((
            DMatrix::zeros(rows, self.state_dim()),
            DMatrix::zeros(rows, self.input_dim()),
        ))
    }
}

/// Wraps a model and hides its analytic Jacobians, forcing finite differences.
pub struct NumericJacobians<D>(pub D);

impl<D: Dynamics> Dynamics for NumericJacobians<D> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn disturbance_dim(&self) -> usize {
        self.0.disturbance_dim()
    }
    fn drift(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.0.drift(x, u)
    }
    fn channel(&self, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        self.0.channel(x, u)
    }
}

/// The pendulum benchmark: model plus constraint sets.
pub fn pendulum_problem(params: Pendulum, dt: f64) -> (DisturbedModel, ConstraintSets) {
    use std::f64::consts::{FRAC_PI_3, PI};
    let model = DisturbedModel::new("pendulum", Arc::new(params), Integrator::Rk4 { dt });
    let sets = ConstraintSets {
        state: Polytope::from_box(&[-FRAC_PI_3, -2.0], &[FRAC_PI_3, 2.0]).unwrap(),
        input: Polytope::from_box(&[-5.0], &[5.0]).unwrap(),
        disturbance: Polytope::from_box(&[-0.01, -0.01, -0.001], &[0.01, 0.01, 0.001]).unwrap(),
        target: Polytope::from_box(&[-PI / 12.0, -0.5], &[PI / 12.0, 0.5]).unwrap(),
    };
    (model, sets)
}
