//! Online safety filter: pass verified nominal actions through, otherwise
//! replay the stored tube controller, then hand over to a terminal
//! controller.

use std::io::Write;
use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_polytope, ConstraintSets, DisturbedModel};
use crate::policy::{clip_to_box, Policy};
use crate::sls::socp::{sample_disturbance, tube_input};
use crate::sls::{generate_nominal, SlsVerifier, VerificationResult, VerificationStatus};

/// Anything that can certify a candidate action over a horizon.
pub trait TubeVerifier: Send + Sync {
    fn horizon(&self) -> usize;
    fn verify(&self, x: &[f64], u: &[f64], reference: &dyn Policy) -> Result<VerificationResult>;
}

impl TubeVerifier for SlsVerifier {
    fn horizon(&self) -> usize {
        SlsVerifier::horizon(self)
    }

    fn verify(&self, x: &[f64], u: &[f64], reference: &dyn Policy) -> Result<VerificationResult> {
        SlsVerifier::verify(self, x, u, reference)
    }
}

/// Wraps a verifier and reports a solver error on the calls whose index
/// (counted from 0) falls in one of `blocked`.
#[derive(Debug)]
pub struct FaultInjector {
    inner: SlsVerifier,
    blocked: Vec<Range<usize>>,
    calls: AtomicUsize,
}

impl FaultInjector {
    pub fn new(inner: SlsVerifier, blocked: Vec<Range<usize>>) -> Self {
        Self {
            inner,
            blocked,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TubeVerifier for FaultInjector {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn verify(&self, x: &[f64], u: &[f64], reference: &dyn Policy) -> Result<VerificationResult> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.blocked.iter().any(|r| r.contains(&call)) {
            return self.inner.verify(x, u, reference);
        }
        let trajectory = generate_nominal(self.inner.model(), x, u, reference, self.inner.horizon())?;
        Ok(VerificationResult {
            status: VerificationStatus::SolverError,
            value: f64::INFINITY,
            trajectory,
            response: None,
            sigma: Vec::new(),
            lambda: Vec::new(),
            eta: Vec::new(),
            gain: None,
            solve_time: 0.0,
            certificate_violation: f64::NAN,
            affine_residual: f64::NAN,
            realization_residual: f64::NAN,
        })
    }
}

/// Saturated linear feedback `u = clip(-K x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalController {
    pub gain: DMatrix<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl TerminalController {
    /// `-K x` before saturation.
    pub fn linear(&self, x: &[f64]) -> Vec<f64> {
        (-(&self.gain * DVector::from_column_slice(x))).iter().copied().collect()
    }
}

impl Policy for TerminalController {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        clip_to_box(&self.linear(x), &self.lo, &self.hi)
    }
}

/// Stabilizing gain of the discrete-time LQR problem, by Riccati iteration.
pub fn dare_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let solve = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let rhs = b.transpose() * p * a;
        s.cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Config("LQR input weight is not positive definite".into()))
    };
    let mut p = q.clone();
    for sweep in 0..100_000 {
        let k = solve(&p)?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).amax();
        if !change.is_finite() {
            return Err(Error::NumericOverflow("Riccati iteration".into()));
        }
        p = next;
        if change <= 1e-12 * (1.0 + p.amax()) {
            return solve(&p);
        }
        if sweep == 99_999 {
            return Err(Error::NonConvergence {
                sweeps: sweep + 1,
                residual: change,
            });
        }
    }
    unreachable!()
}

/// LQR around the origin equilibrium with diagonal weights.
pub fn terminal_lqr(model: &DisturbedModel, sets: &ConstraintSets, q: &[f64], r: &[f64]) -> Result<TerminalController> {
    let (nx, nu) = (model.state_dim(), model.input_dim());
    if q.len() != nx || r.len() != nu {
        return Err(Error::Dimension("LQR weights do not match the model".into()));
    }
    let (a, b) = model.nominal_jacobian(&vec![0.0; nx], &vec![0.0; nu]);
    let gain = dare_gain(
        &a,
        &b,
        &DMatrix::from_diagonal(&DVector::from_column_slice(q)),
        &DMatrix::from_diagonal(&DVector::from_column_slice(r)),
    )?;
    let (lo, hi) = sets.input.bounding_box()?;
    Ok(TerminalController { gain, lo, hi })
}

/// Monte-Carlo check that a controller keeps the state in X from R.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalGate {
    pub initial_states: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TerminalGate {
    fn default() -> Self {
        Self {
            initial_states: 1000,
            steps: 1000,
            seed: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateReport {
    pub rollouts: usize,
    pub violations: usize,
    pub max_h: f64,
}

impl GateReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Rolls `ctrl` out from the vertices of R, then uniform samples of R, under
/// disturbances drawn from the vertices of D.
pub fn validate_terminal(
    model: &DisturbedModel,
    sets: &ConstraintSets,
    ctrl: &dyn Policy,
    gate: &TerminalGate,
) -> Result<GateReport> {
    let r_vertices = sets.target.vertices()?;
    let d_vertices = sets.disturbance.vertices()?;
    let n = gate.initial_states.max(r_vertices.len());
    let per_rollout: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(gate.seed.wrapping_add(i as u64));
            let mut x = match r_vertices.get(i) {
                Some(v) => v.clone(),
                None => sample_polytope(&sets.target, &mut rng),
            };
            let mut worst = sets.h_margin(&x);
            for _ in 0..gate.steps {
                let u = ctrl.act(&x);
                let d = sample_disturbance(&sets.disturbance, &d_vertices, 1.0, &mut rng);
                x = model.step_disturbed(&x, &u, &d)?.iter().copied().collect();
                worst = worst.max(sets.h_margin(&x));
                if worst > 0.0 {
                    break;
                }
            }
            Ok(worst)
        })
        .collect();
    let mut report = GateReport {
        rollouts: n,
        violations: 0,
        max_h: f64::NEG_INFINITY,
    };
    for w in per_rollout {
        let w = w?;
        report.max_h = report.max_h.max(w);
        if w > 0.0 {
            report.violations += 1;
        }
    }
    Ok(report)
}

/// LQR with `q` doubled in its first component until the Monte-Carlo gate
/// passes. Returns the controller and the weights finally used.
pub fn tune_terminal_lqr(
    model: &DisturbedModel,
    sets: &ConstraintSets,
    q: &[f64],
    r: &[f64],
    gate: &TerminalGate,
    max_doublings: usize,
) -> Result<(TerminalController, Vec<f64>)> {
    let mut q = q.to_vec();
    for _ in 0..=max_doublings {
        let ctrl = terminal_lqr(model, sets, &q, r)?;
        if validate_terminal(model, sets, &ctrl, gate)?.passed() {
            return Ok((ctrl, q));
        }
        q[0] *= 2.0;
    }
    Err(Error::Config(format!(
        "no terminal LQR passed the Monte-Carlo gate after {max_doublings} doublings"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Just verified (or not yet started); plan age 0.
    Fresh,
    /// Replaying the stored plan at step `k`.
    Tracking(usize),
    Terminal,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fresh => "fresh",
            Mode::Tracking(_) => "tracking",
            Mode::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Verified,
    Tracking,
    Terminal,
}

#[derive(Debug, Clone)]
struct Plan {
    result: VerificationResult,
    /// Realized `x_1..x_k` since the plan was verified.
    states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FilterState {
    mode: Mode,
    plan: Option<Plan>,
    step: usize,
}

impl Default for FilterState {
    fn default() -> Self {
        Self::new()
    }
}

impl FilterState {
    pub fn new() -> Self {
        Self {
            mode: Mode::Fresh,
            plan: None,
            step: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn has_plan(&self) -> bool {
        self.plan.is_some()
    }

    pub fn stored_plan(&self) -> Option<&VerificationResult> {
        self.plan.as_ref().map(|p| &p.result)
    }

    /// Number of filter steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }
}

/// One row of the filter log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub mode: String,
    pub plan_age: usize,
    pub value: f64,
    pub solve_time: f64,
    pub status: String,
    pub branch: Branch,
    pub clipped: bool,
}

pub struct SafetyFilter<'a> {
    verifier: &'a dyn TubeVerifier,
    reference: &'a dyn Policy,
    terminal: &'a dyn Policy,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> SafetyFilter<'a> {
    /// `reference` supplies the nominal inputs after the first step of every
    /// candidate trajectory.
    pub fn new(
        verifier: &'a dyn TubeVerifier,
        reference: &'a dyn Policy,
        terminal: &'a dyn Policy,
        sets: &ConstraintSets,
    ) -> Result<Self> {
        let (lo, hi) = sets.input.bounding_box()?;
        Ok(Self {
            verifier,
            reference,
            terminal,
            lo,
            hi,
        })
    }

    pub fn horizon(&self) -> usize {
        self.verifier.horizon()
    }

    pub fn step(&self, mut state: FilterState, x: &[f64], u_nom: &[f64]) -> Result<(Vec<f64>, FilterState, StepTelemetry)> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite state given to the filter".into()));
        }
        let u_nom = clip_to_box(u_nom, &self.lo, &self.hi);
        let res = self.verifier.verify(x, &u_nom, self.reference)?;
        let mut tel = StepTelemetry {
            step: state.step,
            mode: String::new(),
            plan_age: 0,
            value: res.value,
            solve_time: res.solve_time,
            status: res.status.as_str().to_string(),
            branch: Branch::Verified,
            clipped: false,
        };
        state.step += 1;

        if res.verified() {
            state.plan = Some(Plan {
                result: res,
                states: Vec::new(),
            });
            state.mode = Mode::Fresh;
            tel.mode = state.mode.name().into();
            return Ok((u_nom, state, tel));
        }

        let Some(plan) = state.plan.as_mut() else {
            return Err(Error::InitialInfeasible {
                value: res.value,
                status: res.status.as_str().to_string(),
            });
        };
        let k = match state.mode {
            Mode::Fresh => 1,
            Mode::Tracking(k) => k + 1,
            Mode::Terminal => usize::MAX,
        };
        let horizon = plan.result.trajectory.horizon();
        let raw = if k < horizon {
            plan.states.push(x.to_vec());
            let gain = plan
                .result
                .gain
                .as_ref()
                .ok_or_else(|| Error::Format("stored plan has no feedback gain".into()))?;
            state.mode = Mode::Tracking(k);
            tel.branch = Branch::Tracking;
            tel.plan_age = k;
            tube_input(&plan.result.trajectory, gain, k, &plan.states)
                .ok_or_else(|| Error::Format("stored plan is shorter than its horizon".into()))?
        } else {
            state.mode = Mode::Terminal;
            tel.branch = Branch::Terminal;
            tel.plan_age = horizon;
            self.terminal.act(x)
        };
        let u = clip_to_box(&raw, &self.lo, &self.hi);
        tel.clipped = u != raw;
        tel.mode = state.mode.name().into();
        Ok((u, state, tel))
    }
}

pub fn write_telemetry_csv<W: Write>(rows: &[StepTelemetry], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(crate::grid::csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_telemetry_csv<R: std::io::Read>(r: R) -> Result<Vec<StepTelemetry>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                row: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
