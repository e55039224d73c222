use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DisturbedModel;
use crate::policy::Policy;

/// `z_0..z_T` and `v_0..v_T`, with `z_{k+1} = f(z_k, v_k)` and
/// `v_{k+1} = pi(z_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
}

impl NominalTrajectory {
    /// Builds a trajectory from explicit data. `states` and `inputs` must both
    /// hold `T + 1` entries.
    pub fn from_parts(states: Vec<Vec<f64>>, inputs: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != inputs.len() || states.len() < 2 {
            return Err(Error::Dimension(format!(
                "trajectory needs T+1 >= 2 states and inputs, got {} and {}",
                states.len(),
                inputs.len()
            )));
        }
        Ok(Self { states, inputs })
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k]
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Largest `|z_{k+1} - f(z_k, v_k)|` over the trajectory.
    pub fn dynamics_residual(&self, model: &DisturbedModel) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..self.horizon() {
            let next = model.step_nominal(&self.states[k], &self.inputs[k])?;
            for (a, b) in next.iter().zip(&self.states[k + 1]) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// Rolls out `f` from `z_0 = x_bar`, `v_0 = u_bar`, with `policy` supplying
/// `v_1..v_T`.
pub fn generate_nominal(
    model: &DisturbedModel,
    x_bar: &[f64],
    u_bar: &[f64],
    policy: &dyn Policy,
    horizon: usize,
) -> Result<NominalTrajectory> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon + 1);
    states.push(x_bar.to_vec());
    inputs.push(u_bar.to_vec());
    for k in 0..horizon {
        let next = model.step_nominal(&states[k], &inputs[k])?;
        let next: Vec<f64> = next.iter().copied().collect();
        let v = policy.act(&next);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow("policy returned a non-finite input".into()));
        }
        states.push(next);
        inputs.push(v);
    }
    Ok(NominalTrajectory { states, inputs })
}
