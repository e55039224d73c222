//! The tube-verification SOCP over system responses.
//!
//! Decision variables are the block lower-triangular responses `Phi_x`
//! (`T x T` blocks of `n_x x n_x`) and `Phi_u` (`n_u x n_x` blocks), the
//! per-step diagonal disturbance filter `sigma_{k,i}` (`k = 0..T-1`), the
//! curvature multipliers `lambda_k`, `eta_k` (`k = 1..T-1`) and the value
//! `V`. Every one-norm and infinity-norm is expanded with absolute-value
//! slacks: each response entry gets a slack `t >= |Phi|`, and norms of
//! linear combinations of several response rows get their own slacks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{affine_residual, assemble_blocks, extract_gain, BlockLowerTriangular};
use super::nominal::{generate_nominal, NominalTrajectory};
use super::program::{ConicProgram, LinearRow, SolveStatus, SolverTolerances};
use crate::error::{Error, Result};
use crate::model::{
    contract_disturbance, linearize_trajectory, sample_polytope, ConstraintSets, DisturbedModel,
    LinearizationBundle,
};
use crate::policy::Policy;
use crate::polytope::Polytope;

pub const GROUP_AFFINE: &str = "affine-subspace";
pub const GROUP_FILTER0: &str = "filter-k0";
pub const GROUP_FILTER: &str = "filter-overbound";
pub const GROUP_ETA: &str = "eta-bound";
pub const GROUP_STATE0: &str = "state-k0";
pub const GROUP_STATE: &str = "state-tube";
pub const GROUP_INPUT0: &str = "input-k0";
pub const GROUP_INPUT: &str = "input-tube";
pub const GROUP_TERMINAL: &str = "terminal";
pub const GROUP_CONE: &str = "rotated-cone";
pub const GROUP_ABS: &str = "abs-slack";

/// Variable index map for one program instance.
#[derive(Debug, Clone)]
pub struct SocpLayout {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub value: usize,
    phi_x: usize,
    phi_u: usize,
    abs_x: usize,
    abs_u: usize,
    sigma: usize,
    lambda: usize,
    eta: usize,
}

fn tri(k: usize, j: usize) -> usize {
    (k - 1) * k / 2 + (j - 1)
}

impl SocpLayout {
    fn new(prog: &mut ConicProgram, horizon: usize, nx: usize, nu: usize) -> Self {
        let nblocks = horizon * (horizon + 1) / 2;
        let value = prog.add_vars(1);
        let phi_x = prog.add_vars(nblocks * nx * nx);
        let phi_u = prog.add_vars(nblocks * nu * nx);
        let abs_x = prog.add_vars(nblocks * nx * nx);
        let abs_u = prog.add_vars(nblocks * nu * nx);
        let sigma = prog.add_vars(horizon * nx);
        let lambda = prog.add_vars(horizon.saturating_sub(1));
        let eta = prog.add_vars(horizon.saturating_sub(1));
        Self {
            horizon,
            nx,
            nu,
            value,
            phi_x,
            phi_u,
            abs_x,
            abs_u,
            sigma,
            lambda,
            eta,
        }
    }

    pub fn phi_x(&self, k: usize, j: usize, r: usize, c: usize) -> usize {
        self.phi_x + tri(k, j) * self.nx * self.nx + r * self.nx + c
    }

    pub fn phi_u(&self, k: usize, j: usize, r: usize, c: usize) -> usize {
        self.phi_u + tri(k, j) * self.nu * self.nx + r * self.nx + c
    }

    fn abs_x(&self, k: usize, j: usize, r: usize, c: usize) -> usize {
        self.abs_x + tri(k, j) * self.nx * self.nx + r * self.nx + c
    }

    fn abs_u(&self, k: usize, j: usize, r: usize, c: usize) -> usize {
        self.abs_u + tri(k, j) * self.nu * self.nx + r * self.nx + c
    }

    /// `sigma_{k,i}`, `k = 0..T-1`.
    pub fn sigma(&self, k: usize, i: usize) -> usize {
        self.sigma + k * self.nx + i
    }

    /// `lambda_k`, `k = 1..T-1`.
    pub fn lambda(&self, k: usize) -> usize {
        self.lambda + k - 1
    }

    /// `eta_k`, `k = 1..T-1`.
    pub fn eta(&self, k: usize) -> usize {
        self.eta + k - 1
    }

    pub fn response_x(&self, sol: &[f64]) -> BlockLowerTriangular {
        let mut out = BlockLowerTriangular::zeros(self.horizon, self.nx, self.nx);
        for k in 1..=self.horizon {
            for j in 1..=k {
                let b = out.block_mut(k, j);
                for r in 0..self.nx {
                    for c in 0..self.nx {
                        b[(r, c)] = sol[self.phi_x(k, j, r, c)];
                    }
                }
            }
        }
        out
    }

    pub fn response_u(&self, sol: &[f64]) -> BlockLowerTriangular {
        let mut out = BlockLowerTriangular::zeros(self.horizon, self.nu, self.nx);
        for k in 1..=self.horizon {
            for j in 1..=k {
                let b = out.block_mut(k, j);
                for r in 0..self.nu {
                    for c in 0..self.nx {
                        b[(r, c)] = sol[self.phi_u(k, j, r, c)];
                    }
                }
            }
        }
        out
    }
}

/// Which response a one-norm term refers to.
#[derive(Clone, Copy)]
enum Resp {
    X,
    U,
}

/// Builds the coefficient list for `||c^T Phi^{k,1:k}||_1` (with `c` a
/// combination of the response's rows). A single nonzero coefficient reuses
/// the per-entry slacks; anything else gets dedicated slacks.
fn one_norm_terms(
    prog: &mut ConicProgram,
    lay: &SocpLayout,
    resp: Resp,
    coef: &[f64],
    k: usize,
    cols: usize,
    scale: f64,
) -> Vec<(usize, f64)> {
    let nz: Vec<(usize, f64)> = coef
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, a)| *a != 0.0)
        .collect();
    let entry = |j: usize, m: usize, c: usize| match resp {
        Resp::X => lay.phi_x(k, j, m, c),
        Resp::U => lay.phi_u(k, j, m, c),
    };
    let slack = |j: usize, m: usize, c: usize| match resp {
        Resp::X => lay.abs_x(k, j, m, c),
        Resp::U => lay.abs_u(k, j, m, c),
    };
    let mut out = Vec::new();
    match nz.len() {
        0 => {}
        1 => {
            let (m, a) = nz[0];
            for j in 1..=k {
                for c in 0..cols {
                    out.push((slack(j, m, c), scale * a.abs()));
                }
            }
        }
        _ => {
            let base = prog.add_vars(k * cols);
            for j in 1..=k {
                for c in 0..cols {
                    let s = base + (j - 1) * cols + c;
                    let mut pos: Vec<(usize, f64)> = nz.iter().map(|(m, a)| (entry(j, *m, c), *a)).collect();
                    let mut neg: Vec<(usize, f64)> = nz.iter().map(|(m, a)| (entry(j, *m, c), -*a)).collect();
                    pos.push((s, -1.0));
                    neg.push((s, -1.0));
                    prog.add_le(GROUP_ABS, LinearRow::new(pos, 0.0));
                    prog.add_le(GROUP_ABS, LinearRow::new(neg, 0.0));
                    out.push((s, scale));
                }
            }
        }
    }
    out
}

/// Assembles the verification program for one nominal trajectory.
///
/// `d_vertices` are the vertices of the disturbance polytope.
pub fn build_socp(
    traj: &NominalTrajectory,
    bundle: &LinearizationBundle,
    sets: &ConstraintSets,
    d_vertices: &[Vec<f64>],
) -> Result<(ConicProgram, SocpLayout)> {
    let t = traj.horizon();
    let mu = bundle.mu.as_ref().ok_or(Error::MissingCurvature)?;
    if bundle.horizon() < t {
        return Err(Error::Dimension(format!(
            "bundle covers {} steps, trajectory has {t}",
            bundle.horizon()
        )));
    }
    let nx = traj.state(0).len();
    let nu = traj.input(0).len();
    if mu.len() != nx {
        return Err(Error::Dimension("curvature bound length differs from n_x".into()));
    }
    let mut prog = ConicProgram::new();
    let lay = SocpLayout::new(&mut prog, t, nx, nu);
    prog.set_objective(vec![(lay.value, 1.0)]);

    // |Phi| <= t for every response entry
    for k in 1..=t {
        for j in 1..=k {
            for r in 0..nx {
                for c in 0..nx {
                    let (p, s) = (lay.phi_x(k, j, r, c), lay.abs_x(k, j, r, c));
                    prog.add_le(GROUP_ABS, LinearRow::new(vec![(p, 1.0), (s, -1.0)], 0.0));
                    prog.add_le(GROUP_ABS, LinearRow::new(vec![(p, -1.0), (s, -1.0)], 0.0));
                }
            }
            for r in 0..nu {
                for c in 0..nx {
                    let (p, s) = (lay.phi_u(k, j, r, c), lay.abs_u(k, j, r, c));
                    prog.add_le(GROUP_ABS, LinearRow::new(vec![(p, 1.0), (s, -1.0)], 0.0));
                    prog.add_le(GROUP_ABS, LinearRow::new(vec![(p, -1.0), (s, -1.0)], 0.0));
                }
            }
        }
    }

    // [I - Z A, -Z B][Phi_x; Phi_u] = Sigma, block (k, j), j <= k
    for k in 1..=t {
        for j in 1..=k {
            for r in 0..nx {
                for c in 0..nx {
                    let mut row = vec![(lay.phi_x(k, j, r, c), 1.0)];
                    if k >= 2 && j < k {
                        let a = &bundle.af[k - 1];
                        let b = &bundle.bf[k - 1];
                        for m in 0..nx {
                            if a[(r, m)] != 0.0 {
                                row.push((lay.phi_x(k - 1, j, m, c), -a[(r, m)]));
                            }
                        }
                        for m in 0..nu {
                            if b[(r, m)] != 0.0 {
                                row.push((lay.phi_u(k - 1, j, m, c), -b[(r, m)]));
                            }
                        }
                    }
                    if j == k && r == c {
                        row.push((lay.sigma(k - 1, r), -1.0));
                    }
                    prog.add_eq(GROUP_AFFINE, LinearRow::new(row, 0.0));
                }
            }
        }
    }

    // k = 0 filter: |g_i(z_0, v_0) d| <= sigma_{0,i}
    for d in d_vertices {
        let gd = &bundle.g[0] * nalgebra::DVector::from_column_slice(d);
        for i in 0..nx {
            prog.add_le(
                GROUP_FILTER0,
                LinearRow::new(vec![(lay.sigma(0, i), -1.0)], -gd[i].abs()),
            );
        }
    }

    // k >= 1 filter overbound
    for k in 1..t {
        let ag = &bundle.ag[k];
        let bg = &bundle.bg[k];
        for d in d_vertices {
            let gd = &bundle.g[k] * nalgebra::DVector::from_column_slice(d);
            let a_rows: DMatrix<f64> = contract_disturbance(ag, d);
            let b_rows: DMatrix<f64> = contract_disturbance(bg, d);
            for i in 0..nx {
                let mut row = vec![(lay.lambda(k), mu[i]), (lay.sigma(k, i), -1.0)];
                let a_coef: Vec<f64> = a_rows.row(i).iter().copied().collect();
                let b_coef: Vec<f64> = b_rows.row(i).iter().copied().collect();
                row.extend(one_norm_terms(&mut prog, &lay, Resp::X, &a_coef, k, nx, 1.0));
                row.extend(one_norm_terms(&mut prog, &lay, Resp::U, &b_coef, k, nx, 1.0));
                prog.add_le(GROUP_FILTER, LinearRow::new(row, -gd[i].abs()));
            }
        }
    }

    // ||[Phi_x^{k,1:k}; Phi_u^{k,1:k}]||_inf <= eta_k
    for k in 1..t {
        for r in 0..nx + nu {
            let mut row = vec![(lay.eta(k), -1.0)];
            for j in 1..=k {
                for c in 0..nx {
                    let s = if r < nx {
                        lay.abs_x(k, j, r, c)
                    } else {
                        lay.abs_u(k, j, r - nx, c)
                    };
                    row.push((s, 1.0));
                }
            }
            prog.add_le(GROUP_ETA, LinearRow::new(row, 0.0));
        }
    }

    let hx = sets.state.h_matrix();
    let hxv = sets.state.h_vector();
    let hu = sets.input.h_matrix();
    let huv = sets.input.h_vector();
    let rx = sets.target.h_matrix();
    let rxv = sets.target.h_vector();
    let dot = |m: &DMatrix<f64>, i: usize, x: &[f64]| -> f64 {
        x.iter().enumerate().map(|(j, v)| m[(i, j)] * v).sum()
    };

    // state margins
    for i in 0..hx.nrows() {
        let c = dot(hx, i, traj.state(0)) - hxv[i];
        prog.add_le(GROUP_STATE0, LinearRow::new(vec![(lay.value, -1.0)], -c));
    }
    for k in 1..=t {
        for i in 0..hx.nrows() {
            let c = dot(hx, i, traj.state(k)) - hxv[i];
            let coef: Vec<f64> = hx.row(i).iter().copied().collect();
            let mut row = one_norm_terms(&mut prog, &lay, Resp::X, &coef, k, nx, 1.0);
            row.push((lay.value, -1.0));
            prog.add_le(GROUP_STATE, LinearRow::new(row, -c));
        }
    }

    // input margins: V on the right at k = 0, zero for k = 1..T
    for i in 0..hu.nrows() {
        let c = dot(hu, i, traj.input(0)) - huv[i];
        prog.add_le(GROUP_INPUT0, LinearRow::new(vec![(lay.value, -1.0)], -c));
    }
    for k in 1..=t {
        for i in 0..hu.nrows() {
            let c = dot(hu, i, traj.input(k)) - huv[i];
            let coef: Vec<f64> = hu.row(i).iter().copied().collect();
            let row = one_norm_terms(&mut prog, &lay, Resp::U, &coef, k, nx, 1.0);
            prog.add_le(GROUP_INPUT, LinearRow::new(row, -c));
        }
    }

    // terminal margins
    for i in 0..rx.nrows() {
        let c = dot(rx, i, traj.state(t)) - rxv[i];
        let coef: Vec<f64> = rx.row(i).iter().copied().collect();
        let mut row = one_norm_terms(&mut prog, &lay, Resp::X, &coef, t, nx, 1.0);
        row.push((lay.value, -1.0));
        prog.add_le(GROUP_TERMINAL, LinearRow::new(row, -c));
    }

    // ||((lambda - 1)/2, eta)|| <= (lambda + 1)/2
    for k in 1..t {
        prog.add_soc(
            GROUP_CONE,
            vec![
                LinearRow::new(vec![(lay.lambda(k), -0.5)], 0.5),
                LinearRow::new(vec![(lay.lambda(k), -0.5)], -0.5),
                LinearRow::new(vec![(lay.eta(k), -1.0)], 0.0),
            ],
        );
    }

    Ok((prog, lay))
}

/// Block lower-triangular system responses of one solved program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponse {
    pub phi_x: BlockLowerTriangular,
    pub phi_u: BlockLowerTriangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerificationStatus {
    Solved,
    Infeasible,
    SolverError,
    /// The nominal trajectory left `X x U` before the horizon, so no program
    /// was built. `value` then holds the nominal lower bound.
    Rejected,
}

impl VerificationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Solved => "solved",
            Self::Infeasible => "infeasible",
            Self::SolverError => "solver-error",
            Self::Rejected => "rejected",
        }
    }
}

impl std::str::FromStr for VerificationStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "solved" => Ok(Self::Solved),
            "infeasible" => Ok(Self::Infeasible),
            "solver-error" => Ok(Self::SolverError),
            "rejected" => Ok(Self::Rejected),
            other => Err(Error::Format(format!("unknown status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerificationResult {
    pub status: VerificationStatus,
    /// Optimal `V`; `+inf` when the program was infeasible or failed.
    pub value: f64,
    pub trajectory: NominalTrajectory,
    pub response: Option<SystemResponse>,
    /// `sigma[k][i]`, `k = 0..T-1`.
    pub sigma: Vec<Vec<f64>>,
    /// `lambda[k - 1]`, `k = 1..T-1`.
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub gain: Option<BlockLowerTriangular>,
    pub solve_time: f64,
    /// Largest constraint violation of the returned point, by direct
    /// evaluation.
    pub certificate_violation: f64,
    pub affine_residual: f64,
    pub realization_residual: f64,
}

impl VerificationResult {
    /// `V <= 0` with a solved program.
    pub fn verified(&self) -> bool {
        self.status == VerificationStatus::Solved && self.value <= 0.0
    }

    /// `u_k = v_k + sum_j K^{k,j} (x_j - z_j)`, `k = 1..T`; `states` holds
    /// the realized `x_1..x_k`.
    pub fn feedback_input(&self, k: usize, states: &[Vec<f64>]) -> Option<Vec<f64>> {
        let gain = self.gain.as_ref()?;
        tube_input(&self.trajectory, gain, k, states)
    }
}

pub(crate) fn tube_input(
    traj: &NominalTrajectory,
    gain: &BlockLowerTriangular,
    k: usize,
    states: &[Vec<f64>],
) -> Option<Vec<f64>> {
    if k == 0 || k > traj.horizon() || states.len() < k {
        return None;
    }
    let mut u = traj.input(k).to_vec();
    for j in 1..=k {
        let kb = gain.block(k, j)?;
        let zj = traj.state(j);
        for (r, ur) in u.iter_mut().enumerate() {
            for c in 0..zj.len() {
                *ur += kb[(r, c)] * (states[j - 1][c] - zj[c]);
            }
        }
    }
    Some(u)
}

/// Verifies candidate actions for a fixed model, constraint sets and
/// curvature bound.
#[derive(Debug, Clone)]
pub struct SlsVerifier {
    model: DisturbedModel,
    sets: ConstraintSets,
    mu: Vec<f64>,
    horizon: usize,
    d_vertices: Vec<Vec<f64>>,
    tolerances: SolverTolerances,
}

impl SlsVerifier {
    pub fn new(
        model: DisturbedModel,
        sets: ConstraintSets,
        mu: Vec<f64>,
        horizon: usize,
        tolerances: SolverTolerances,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if mu.len() != model.state_dim() || mu.iter().any(|m| !(*m >= 0.0)) {
            return Err(Error::Config("curvature bound must be nonnegative, one per state".into()));
        }
        let d_vertices = sets.disturbance.vertices()?;
        Ok(Self {
            model,
            sets,
            mu,
            horizon,
            d_vertices,
            tolerances,
        })
    }

    pub fn model(&self) -> &DisturbedModel {
        &self.model
    }

    pub fn sets(&self) -> &ConstraintSets {
        &self.sets
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn disturbance_vertices(&self) -> &[Vec<f64>] {
        &self.d_vertices
    }

    /// Same verifier over a different disturbance set.
    pub fn with_disturbance(&self, disturbance: Polytope) -> Result<Self> {
        let mut sets = self.sets.clone();
        sets.disturbance = disturbance;
        Self::new(self.model.clone(), sets, self.mu.clone(), self.horizon, self.tolerances)
    }

    pub fn verify(&self, x_bar: &[f64], u_bar: &[f64], policy: &dyn Policy) -> Result<VerificationResult> {
        let traj = generate_nominal(&self.model, x_bar, u_bar, policy, self.horizon)?;
        self.verify_trajectory(traj)
    }

    /// Builds the program for `traj` without solving it.
    pub fn program(&self, traj: &NominalTrajectory) -> Result<(ConicProgram, SocpLayout)> {
        let bundle = linearize_trajectory(&self.model, &self.sets, traj, Some(&self.mu))?;
        build_socp(traj, &bundle, &self.sets, &self.d_vertices)
    }

    pub fn verify_trajectory(&self, traj: NominalTrajectory) -> Result<VerificationResult> {
        let t = traj.horizon();
        let bundle = match linearize_trajectory(&self.model, &self.sets, &traj, Some(&self.mu)) {
            Ok(b) => b,
            Err(Error::Domain(_)) => return Ok(self.rejected(traj)),
            Err(e) => return Err(e),
        };
        let (prog, lay) = build_socp(&traj, &bundle, &self.sets, &self.d_vertices)?;
        let sol = prog.solve(&self.tolerances);
        let status = match sol.status {
            SolveStatus::Solved => VerificationStatus::Solved,
            SolveStatus::Infeasible => VerificationStatus::Infeasible,
            SolveStatus::SolverError => VerificationStatus::SolverError,
        };
        if status != VerificationStatus::Solved {
            return Ok(VerificationResult {
                status,
                value: f64::INFINITY,
                trajectory: traj,
                response: None,
                sigma: Vec::new(),
                lambda: Vec::new(),
                eta: Vec::new(),
                gain: None,
                solve_time: sol.solve_time,
                certificate_violation: f64::NAN,
                affine_residual: f64::NAN,
                realization_residual: f64::NAN,
            });
        }
        let x = &sol.x;
        let nx = lay.nx;
        let phi_x = lay.response_x(x);
        let phi_u = lay.response_u(x);
        let sigma: Vec<Vec<f64>> = (0..t).map(|k| (0..nx).map(|i| x[lay.sigma(k, i)]).collect()).collect();
        let lambda: Vec<f64> = (1..t).map(|k| x[lay.lambda(k)]).collect();
        let eta: Vec<f64> = (1..t).map(|k| x[lay.eta(k)]).collect();
        let gain = extract_gain(&phi_x, &phi_u);
        let blocks = assemble_blocks(&bundle, t)?;
        let affine = affine_residual(&phi_x, &phi_u, &sigma, &blocks);
        let realization = (gain.to_dense() * phi_x.to_dense() - phi_u.to_dense()).amax();
        Ok(VerificationResult {
            status,
            value: x[lay.value],
            trajectory: traj,
            response: Some(SystemResponse { phi_x, phi_u }),
            sigma,
            lambda,
            eta,
            gain: Some(gain),
            solve_time: sol.solve_time,
            certificate_violation: prog.max_violation(x),
            affine_residual: affine,
            realization_residual: realization,
        })
    }

    fn rejected(&self, traj: NominalTrajectory) -> VerificationResult {
        let t = traj.horizon();
        let mut bound = (0..=t)
            .map(|k| self.sets.h_margin(traj.state(k)))
            .fold(self.sets.l_margin(traj.state(t)), f64::max);
        if bound <= 0.0 {
            // only an input left U; the zero right side of the input
            // constraints makes the program infeasible
            bound = f64::INFINITY;
        }
        VerificationResult {
            status: VerificationStatus::Rejected,
            value: bound,
            trajectory: traj,
            response: None,
            sigma: Vec::new(),
            lambda: Vec::new(),
            eta: Vec::new(),
            gain: None,
            solve_time: 0.0,
            certificate_violation: f64::NAN,
            affine_residual: f64::NAN,
            realization_residual: f64::NAN,
        }
    }
}

/// Worst margins seen over a batch of closed-loop rollouts of the tube
/// controller.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoundnessReport {
    pub rollouts: usize,
    /// `max_k h(x_k)` and `l(x_T)` combined: the trajectory value.
    pub max_value: f64,
    pub max_state_margin: f64,
    pub max_terminal_margin: f64,
    /// Input margin at `k = 0` (bounded by `V`).
    pub max_input0_margin: f64,
    /// Input margin over `k = 1..T` (bounded by 0).
    pub max_input_margin: f64,
    /// Largest `|w_{k,i}| - sigma_{k,i}` of the lumped disturbance.
    pub max_filter_excess: f64,
    /// Rollouts in which some bound was exceeded by more than the tolerance.
    pub violations: usize,
}

/// Draws a disturbance: a vertex with probability `vertex_bias`, otherwise
/// a uniform interior point.
pub fn sample_disturbance<R: Rng>(
    d: &Polytope,
    vertices: &[Vec<f64>],
    vertex_bias: f64,
    rng: &mut R,
) -> Vec<f64> {
    if !vertices.is_empty() && rng.gen_bool(vertex_bias.clamp(0.0, 1.0)) {
        vertices[rng.gen_range(0..vertices.len())].clone()
    } else {
        sample_polytope(d, rng)
    }
}

/// Rolls out the true disturbed dynamics from `z_0` under the tube
/// controller and compares every margin against the certificate. The first
/// `|V_D|` rollouts hold each disturbance vertex constant; the rest draw
/// vertex-biased sequences.
pub fn tube_soundness_check(
    verifier: &SlsVerifier,
    result: &VerificationResult,
    n_rollouts: usize,
    seed: u64,
    tol: f64,
) -> Result<SoundnessReport> {
    let gain = result
        .gain
        .as_ref()
        .filter(|_| result.status == VerificationStatus::Solved)
        .ok_or_else(|| Error::Config("soundness check needs a solved verification".into()))?;
    let traj = &result.trajectory;
    let t = traj.horizon();
    let model = &verifier.model;
    let sets = &verifier.sets;
    let verts = &verifier.d_vertices;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SoundnessReport {
        rollouts: n_rollouts,
        max_value: f64::NEG_INFINITY,
        max_state_margin: f64::NEG_INFINITY,
        max_terminal_margin: f64::NEG_INFINITY,
        max_input0_margin: f64::NEG_INFINITY,
        max_input_margin: f64::NEG_INFINITY,
        max_filter_excess: f64::NEG_INFINITY,
        violations: 0,
    };
    let v_star = result.value;
    for r in 0..n_rollouts {
        let constant = (r < verts.len()).then(|| verts[r].clone());
        let mut x = traj.state(0).to_vec();
        let mut u = traj.input(0).to_vec();
        let mut realized: Vec<Vec<f64>> = Vec::with_capacity(t);
        let mut state_m = sets.h_margin(&x);
        let input0_m = sets.input.margin(&u);
        let mut input_m = f64::NEG_INFINITY;
        let mut excess = f64::NEG_INFINITY;
        for k in 0..t {
            let d = constant
                .clone()
                .unwrap_or_else(|| sample_disturbance(&sets.disturbance, verts, 0.8, &mut rng));
            let next = model.step_disturbed(&x, &u, &d)?;
            let next: Vec<f64> = next.iter().copied().collect();
            // lumped disturbance w_k against the filter sigma_k
            let lin = model.linearize_at(traj.state(k), traj.input(k));
            let dx: Vec<f64> = x.iter().zip(traj.state(k)).map(|(a, b)| a - b).collect();
            let du: Vec<f64> = u.iter().zip(traj.input(k)).map(|(a, b)| a - b).collect();
            let pred = &lin.af * nalgebra::DVector::from_column_slice(&dx)
                + &lin.bf * nalgebra::DVector::from_column_slice(&du);
            for i in 0..next.len() {
                let w = next[i] - traj.state(k + 1)[i] - pred[i];
                excess = excess.max(w.abs() - result.sigma[k][i]);
            }
            realized.push(next.clone());
            state_m = state_m.max(sets.h_margin(&next));
            u = tube_input(traj, gain, k + 1, &realized)
                .ok_or_else(|| Error::Dimension("gain does not cover the horizon".into()))?;
            input_m = input_m.max(sets.input.margin(&u));
            x = next;
        }
        let term_m = sets.l_margin(&x);
        let value = state_m.max(term_m);
        rep.max_value = rep.max_value.max(value);
        rep.max_state_margin = rep.max_state_margin.max(state_m);
        rep.max_terminal_margin = rep.max_terminal_margin.max(term_m);
        rep.max_input0_margin = rep.max_input0_margin.max(input0_m);
        rep.max_input_margin = rep.max_input_margin.max(input_m);
        rep.max_filter_excess = rep.max_filter_excess.max(excess);
        if value > v_star + tol || input0_m > v_star + tol || input_m > tol || excess > tol {
            rep.violations += 1;
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{pendulum_problem, CurvatureOptions, Integrator, LinearModel, Pendulum};

    fn lqr_like(x: &[f64]) -> Vec<f64> {
        vec![(-(10.0 * x[0] + 3.0 * x[1])).clamp(-5.0, 5.0)]
    }

    fn pendulum_verifier(horizon: usize) -> SlsVerifier {
        let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let opts = CurvatureOptions {
            samples: 20_000,
            ..CurvatureOptions::default()
        };
        let mu = crate::model::curvature_bounds(&m, &sets, &opts);
        SlsVerifier::new(m, sets, mu, horizon, SolverTolerances::default()).unwrap()
    }

    fn linear_verifier(d_half: f64) -> SlsVerifier {
        let lin = LinearModel {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 0.1]),
            g: DMatrix::identity(2, 2),
        };
        let model = DisturbedModel::new("linear", Arc::new(lin), Integrator::Discrete);
        let sets = ConstraintSets {
            state: Polytope::from_box(&[-2.0, -2.0], &[2.0, 2.0]).unwrap(),
            input: Polytope::from_box(&[-1.0], &[1.0]).unwrap(),
            disturbance: Polytope::from_box(&[-d_half, -d_half], &[d_half, d_half]).unwrap(),
            target: Polytope::from_box(&[-0.5, -0.5], &[0.5, 0.5]).unwrap(),
        };
        SlsVerifier::new(model, sets, vec![0.0, 0.0], 6, SolverTolerances::default()).unwrap()
    }

    #[test]
    fn zero_disturbance_value_is_nominal_margin() {
        let ver = linear_verifier(0.0);
        let pi = |x: &[f64]| vec![(-(1.0 * x[0] + 1.5 * x[1])).clamp(-1.0, 1.0)];
        let res = ver.verify(&[0.3, -0.2], &[0.1], &pi).unwrap();
        assert_eq!(res.status, VerificationStatus::Solved);
        let tr = &res.trajectory;
        let sets = ver.sets();
        let mut expected = sets.input.margin(tr.input(0));
        for k in 0..=tr.horizon() {
            expected = expected.max(sets.h_margin(tr.state(k)));
        }
        expected = expected.max(sets.l_margin(tr.state(tr.horizon())));
        assert!((res.value - expected).abs() < 1e-7, "{} vs {expected}", res.value);
    }

    #[test]
    fn filter_row_count_matches_index_ranges() {
        let ver = pendulum_verifier(25);
        let traj = generate_nominal(ver.model(), &[0.1, 0.0], &[0.0], &lqr_like, 25).unwrap();
        let (prog, _) = ver.program(&traj).unwrap();
        assert_eq!(ver.disturbance_vertices().len(), 8);
        assert_eq!(prog.row_count(GROUP_FILTER), 24 * 2 * 8);
        assert_eq!(prog.row_count(GROUP_FILTER0), 2 * 8);
        assert_eq!(prog.row_count(GROUP_STATE0), 4);
        assert_eq!(prog.row_count(GROUP_STATE), 25 * 4);
        assert_eq!(prog.row_count(GROUP_INPUT), 25 * 2);
        assert_eq!(prog.row_count(GROUP_TERMINAL), 4);
        assert_eq!(prog.row_count(GROUP_CONE), 24 * 3);
    }

    #[test]
    fn solved_point_passes_direct_recheck() {
        let ver = pendulum_verifier(10);
        for x in [[0.0, 0.0], [0.2, -0.3], [-0.4, 0.6]] {
            let res = ver.verify(&x, &lqr_like(&x), &lqr_like).unwrap();
            assert_eq!(res.status, VerificationStatus::Solved, "{x:?}");
            assert!(res.certificate_violation <= 1e-8, "{}", res.certificate_violation);
            assert!(res.affine_residual <= 1e-6);
            assert!(res.realization_residual <= 1e-6);
            for (l, e) in res.lambda.iter().zip(&res.eta) {
                assert!(e * e <= l + 1e-8);
            }
            let gain = res.gain.as_ref().unwrap();
            let dense = gain.to_dense();
            for r in 0..10 {
                for c in r + 1..10 {
                    assert!(dense.view((r, 2 * c), (1, 2)).iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn value_bounded_by_initial_margin_outside_x() {
        let ver = pendulum_verifier(5);
        let x = [std::f64::consts::FRAC_PI_3 + 0.05, -1.5];
        let res = ver.verify(&x, &[5.0], &lqr_like).unwrap();
        let h0 = ver.sets().h_margin(&x);
        assert!(h0 > 0.0);
        assert!(res.value >= h0 - 1e-8, "{:?} {}", res.status, res.value);
        assert!(!res.verified());
    }

    #[test]
    fn zero_disturbance_reproduces_nominal_rollout() {
        let ver = pendulum_verifier(10);
        let res = ver.verify(&[0.1, 0.2], &[0.0], &lqr_like).unwrap();
        let zero = Polytope::from_box(&[0.0; 3], &[0.0; 3]).unwrap();
        let quiet = SlsVerifier::new(
            ver.model().clone(),
            ConstraintSets {
                disturbance: zero,
                ..ver.sets().clone()
            },
            ver.mu().to_vec(),
            10,
            SolverTolerances::default(),
        )
        .unwrap();
        let rep = tube_soundness_check(&quiet, &res, 3, 0, 1e-9).unwrap();
        let tr = &res.trajectory;
        let nominal = (0..=10)
            .map(|k| ver.sets().h_margin(tr.state(k)))
            .fold(ver.sets().l_margin(tr.state(10)), f64::max);
        assert!((rep.max_value - nominal).abs() < 1e-12);
        assert!(rep.max_value <= res.value + 1e-6);
    }

    #[test]
    fn rollouts_respect_certificate() {
        let ver = pendulum_verifier(25);
        for x in [[0.0, 0.0], [0.4, -0.5]] {
            let res = ver.verify(&x, &lqr_like(&x), &lqr_like).unwrap();
            assert!(res.verified(), "{x:?}: {}", res.value);
            let rep = tube_soundness_check(&ver, &res, 200, 7, 1e-6).unwrap();
            assert_eq!(rep.violations, 0, "{rep:?}");
            assert!(rep.max_input_margin <= 1e-6);
            assert!(rep.max_filter_excess <= 1e-6);
        }
    }

    #[test]
    fn rotated_cone_matches_squared_bound() {
        let ver = pendulum_verifier(3);
        let traj = generate_nominal(ver.model(), &[0.0, 0.0], &[0.0], &lqr_like, 3).unwrap();
        let (prog, lay) = ver.program(&traj).unwrap();
        let cone_violation = |lambda: f64, eta: f64| {
            let mut x = vec![0.0; prog.num_vars()];
            x[lay.lambda(1)] = lambda;
            x[lay.eta(1)] = eta;
            x[lay.lambda(2)] = 1.0;
            prog.violation_by_group(&x)
                .into_iter()
                .find(|(g, _)| g == GROUP_CONE)
                .unwrap()
                .1
        };
        for &(lambda, eta) in &[(0.0, 0.0), (1.0, 1.0), (4.0, 2.0), (0.25, 0.5), (9.0, -3.0)] {
            assert!(cone_violation(lambda, eta) <= 1e-12, "({lambda}, {eta})");
            assert!(cone_violation(lambda, eta * 1.01 + 0.01f64.copysign(eta)) > 0.0);
        }
        assert!(cone_violation(-0.1, 0.0) > 0.0);
    }

    #[test]
    fn shrinking_disturbance_never_raises_value() {
        let ver = pendulum_verifier(15);
        let traj = generate_nominal(ver.model(), &[0.3, 0.4], &[-1.0], &lqr_like, 15).unwrap();
        let full = ver.verify_trajectory(traj.clone()).unwrap();
        let none = ver
            .with_disturbance(ver.sets().disturbance.scaled(0.0).unwrap())
            .unwrap()
            .verify_trajectory(traj)
            .unwrap();
        assert_eq!(full.status, VerificationStatus::Solved);
        assert_eq!(none.status, VerificationStatus::Solved);
        assert!(none.value <= full.value + 1e-8);
    }

    #[test]
    fn nominal_leaving_x_is_rejected() {
        let ver = pendulum_verifier(25);
        let res = ver.verify(&[0.9, 1.5], &[5.0], &|_: &[f64]| vec![5.0]).unwrap();
        assert_eq!(res.status, VerificationStatus::Rejected);
        assert!(res.value > 0.0);
    }

    #[test]
    fn status_round_trips_through_text() {
        for s in [
            VerificationStatus::Solved,
            VerificationStatus::Infeasible,
            VerificationStatus::SolverError,
            VerificationStatus::Rejected,
        ] {
            assert_eq!(s.as_str().parse::<VerificationStatus>().unwrap(), s);
        }
    }
}
