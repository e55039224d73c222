//! Experiment configuration read from TOML.
//!
//! ```toml
//! out_dir = "out"
//!
//! [model]
//! name = "pendulum"            # or "linear"
//! dt = 0.05
//! pendulum = { g = 10.0, l = 1.0, m = 1.0 }
//! # linear = { a = [[1.0, 0.1], [0.0, 1.0]], b = [[0.0], [0.1]], g = [[0.1, 0.0], [0.0, 0.1]] }
//!
//! [sets.state]                 # a box, or `h_matrix` rows plus `h_vector`
//! lo = [-1.0471975511965976, -2.0]
//! hi = [1.0471975511965976, 2.0]
//! ```
//!
//! Every section has defaults reproducing the pendulum experiment, so an
//! empty file is a valid configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::TerminalGate;
use crate::grid::{action_grid, RAConfig};
use crate::learn::TrainConfig;
use crate::model::{
    curvature_bounds, pendulum_problem, ConstraintSets, CurvatureOptions, DisturbedModel, Integrator, LinearModel,
    Pendulum,
};
use crate::polytope::Polytope;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    pub g: f64,
    pub l: f64,
    pub m: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { g: 10.0, l: 1.0, m: 1.0 }
    }
}

/// Discrete-time `x+ = A x + B u + G d`, matrices given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub dt: f64,
    pub pendulum: PendulumParams,
    pub linear: Option<LinearParams>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "pendulum".into(),
            dt: 0.05,
            pendulum: PendulumParams::default(),
            linear: None,
        }
    }
}

/// A box `lo <= x <= hi`, or a general polytope `H x <= h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    HalfSpaces { h_matrix: Vec<Vec<f64>>, h_vector: Vec<f64> },
}

impl SetSpec {
    pub fn to_polytope(&self) -> Result<Polytope> {
        match self {
            SetSpec::Box { lo, hi } => Polytope::from_box(lo, hi),
            SetSpec::HalfSpaces { h_matrix, h_vector } => {
                Polytope::new(matrix_from_rows(h_matrix)?, DVector::from_column_slice(h_vector))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetsSection {
    pub state: Option<SetSpec>,
    pub input: Option<SetSpec>,
    pub disturbance: Option<SetSpec>,
    pub target: Option<SetSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurvatureSection {
    pub samples: usize,
    pub inflation: f64,
    pub seed: u64,
    /// Replaces the sampled bound when present.
    pub analytic: Option<Vec<f64>>,
}

impl Default for CurvatureSection {
    fn default() -> Self {
        let d = CurvatureOptions::default();
        Self {
            samples: d.samples,
            inflation: d.inflation,
            seed: d.seed,
            analytic: None,
        }
    }
}

/// The grid-DP oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub shape: Vec<usize>,
    pub gamma: f64,
    /// Evenly spaced actions per input dimension, bounds included.
    pub actions: usize,
    pub fixpoint_tol: f64,
    pub max_sweeps: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            shape: vec![121, 121],
            gamma: 0.999,
            actions: 11,
            fixpoint_tol: 1e-9,
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Points per state axis; the first entry runs along `x1`.
    pub shape: Vec<usize>,
    pub horizon: usize,
    /// Training seeds tried in order until the coverage check passes.
    pub seeds: Vec<u64>,
    pub min_coverage: f64,
    /// Verified points re-checked by tube rollouts in `bench`.
    pub soundness_points: usize,
    pub soundness_rollouts: usize,
    pub timing_budget: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            shape: vec![40, 60],
            horizon: 25,
            seeds: vec![0, 1, 2],
            min_coverage: 0.6,
            soundness_points: 200,
            soundness_rollouts: 100,
            timing_budget: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub lqr_q: Vec<f64>,
    pub lqr_r: Vec<f64>,
    pub max_doublings: usize,
    pub gate: TerminalGate,
    pub x0: Vec<f64>,
    /// Constant nominal input; deliberately unsafe by default.
    pub nominal_input: Vec<f64>,
    pub steps: usize,
    pub vertex_bias: f64,
    pub seed: u64,
    /// Verifier calls (0-based, half-open `[start, end)`) forced to fail.
    pub blocked_calls: Vec<[usize; 2]>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            lqr_q: vec![10.0, 1.0],
            lqr_r: vec![0.1],
            max_doublings: 20,
            gate: TerminalGate::default(),
            x0: vec![0.0, 0.0],
            nominal_input: vec![5.0],
            steps: 2000,
            vertex_bias: 0.8,
            seed: 0,
            blocked_calls: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub sets: SetsSection,
    pub curvature: CurvatureSection,
    pub oracle: OracleSection,
    pub train: TrainConfig,
    pub sweep: SweepSection,
    pub filter: FilterSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            sets: SetsSection::default(),
            curvature: CurvatureSection::default(),
            oracle: OracleSection::default(),
            train: TrainConfig::default(),
            sweep: SweepSection::default(),
            filter: FilterSection::default(),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("matrix rows must be nonempty and of equal length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.shape.len() < 2 || self.sweep.shape.iter().any(|n| *n < 2) {
            return Err(Error::Config("sweep resolution must be at least 2 x 2".into()));
        }
        if self.oracle.shape.iter().any(|n| *n < 2) {
            return Err(Error::Config("oracle resolution must be at least 2 per axis".into()));
        }
        if self.sweep.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.sweep.seeds.is_empty() {
            return Err(Error::Config("at least one training seed is required".into()));
        }
        if !(self.model.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        self.train.validate()
    }

    /// Model and constraint sets from the registry, with any configured set
    /// overriding the model's default.
    pub fn problem(&self) -> Result<(DisturbedModel, ConstraintSets)> {
        let (model, defaults) = match self.model.name.as_str() {
            "pendulum" => {
                let p = &self.model.pendulum;
                let (m, s) = pendulum_problem(
                    Pendulum {
                        gravity: p.g,
                        length: p.l,
                        mass: p.m,
                    },
                    self.model.dt,
                );
                (m, Some(s))
            }
            "linear" => {
                let lin = self
                    .model
                    .linear
                    .as_ref()
                    .ok_or_else(|| Error::Config("model `linear` needs a [model.linear] table".into()))?;
                let m = LinearModel {
                    a: matrix_from_rows(&lin.a)?,
                    b: matrix_from_rows(&lin.b)?,
                    g: matrix_from_rows(&lin.g)?,
                };
                if m.a.nrows() != m.a.ncols() || m.b.nrows() != m.a.nrows() || m.g.nrows() != m.a.nrows() {
                    return Err(Error::Dimension("linear model matrices do not conform".into()));
                }
                (DisturbedModel::new("linear", Arc::new(m), Integrator::Discrete), None)
            }
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        };
        let pick = |spec: &Option<SetSpec>, default: Option<&Polytope>, name: &str| -> Result<Polytope> {
            match (spec, default) {
                (Some(s), _) => s.to_polytope(),
                (None, Some(p)) => Ok(p.clone()),
                (None, None) => Err(Error::Config(format!("set `{name}` must be configured"))),
            }
        };
        let sets = ConstraintSets {
            state: pick(&self.sets.state, defaults.as_ref().map(|s| &s.state), "state")?,
            input: pick(&self.sets.input, defaults.as_ref().map(|s| &s.input), "input")?,
            disturbance: pick(&self.sets.disturbance, defaults.as_ref().map(|s| &s.disturbance), "disturbance")?,
            target: pick(&self.sets.target, defaults.as_ref().map(|s| &s.target), "target")?,
        };
        sets.validate(&model)?;
        Ok((model, sets))
    }

    pub fn curvature(&self, model: &DisturbedModel, sets: &ConstraintSets) -> Result<Vec<f64>> {
        if let Some(mu) = &self.curvature.analytic {
            if mu.len() != model.state_dim() || mu.iter().any(|m| !(*m >= 0.0)) {
                return Err(Error::Config("analytic curvature must be nonnegative, one per state".into()));
            }
            return Ok(mu.clone());
        }
        Ok(curvature_bounds(
            model,
            sets,
            &CurvatureOptions {
                samples: self.curvature.samples,
                inflation: self.curvature.inflation,
                seed: self.curvature.seed,
            },
        ))
    }

    pub fn ra_config(&self, sets: &ConstraintSets) -> Result<RAConfig> {
        let cfg = RAConfig {
            gamma: self.oracle.gamma,
            actions: action_grid(sets, self.oracle.actions)?,
            disturbances: sets.disturbance.vertices()?,
            fixpoint_tol: self.oracle.fixpoint_tol,
            max_sweeps: self.oracle.max_sweeps,
        };
        cfg.validate_against(sets)?;
        Ok(cfg)
    }

    pub fn blocked_calls(&self) -> Vec<std::ops::Range<usize>> {
        self.filter.blocked_calls.iter().map(|[a, b]| *a..*b).collect()
    }
}
