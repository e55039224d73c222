//! Grid dynamic programming for discounted robust reach-avoid values.
//!
//! Successors `F(x, u, d)` of every node are computed once and stored as
//! multilinear stencils, so one sweep of any operator is a gather over a
//! flat table. A successor outside the grid box carries the analytic value
//! `max{l, h}` instead of a stencil.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConstraintSets, DisturbedModel};
use crate::policy::Policy;

/// Values on a rectangular grid, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridValueFunction {
    axes: Vec<Vec<f64>>,
    values: Vec<f64>,
}

/// Multilinear interpolation weights of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl GridValueFunction {
    pub fn new(axes: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Dimension("grid needs at least one axis".into()));
        }
        for (i, ax) in axes.iter().enumerate() {
            if ax.len() < 2 {
                return Err(Error::Config(format!("axis {i} has fewer than 2 nodes")));
            }
            if ax.windows(2).any(|w| !(w[1] > w[0])) || ax.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("axis {i} is not strictly increasing")));
            }
        }
        let n: usize = axes.iter().map(Vec::len).product();
        if values.len() != n {
            return Err(Error::Dimension(format!("{} values for {n} nodes", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("grid values must be finite".into()));
        }
        Ok(Self { axes, values })
    }

    /// Evenly spaced axes with `counts[i]` nodes on `[lo[i], hi[i]]`, values 0.
    pub fn uniform(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        if lo.len() != hi.len() || lo.len() != counts.len() {
            return Err(Error::Dimension("bounds and counts differ in length".into()));
        }
        let axes: Vec<Vec<f64>> = lo
            .iter()
            .zip(hi)
            .zip(counts)
            .map(|((a, b), &n)| {
                (0..n)
                    .map(|i| {
                        if i + 1 == n {
                            *b
                        } else {
                            a + (b - a) * i as f64 / (n.max(2) - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let n = counts.iter().product();
        Self::new(axes, vec![0.0; n])
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    /// Same axes, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.axes.clone(), values)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            let n = self.axes[a].len();
            out[a] = flat % n;
            flat /= n;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, ax)| acc * ax.len() + i)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(i, ax)| ax[*i])
            .collect()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a[a.len() - 1]).collect()
    }

    /// Interpolation stencil of `x`, or `None` outside the grid box.
    pub fn stencil(&self, x: &[f64]) -> Option<Stencil> {
        let d = self.dim();
        if x.len() != d {
            return None;
        }
        let mut cell = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        for (ax, &v) in self.axes.iter().zip(x) {
            let (lo, hi) = (ax[0], ax[ax.len() - 1]);
            if !(v >= lo && v <= hi) {
                return None;
            }
            let i = ax.partition_point(|a| *a <= v).clamp(1, ax.len() - 1) - 1;
            let t = ((v - ax[i]) / (ax[i + 1] - ax[i])).clamp(0.0, 1.0);
            cell.push(i);
            frac.push(t);
        }
        let corners = 1usize << d;
        let mut nodes = Vec::with_capacity(corners);
        let mut weights = Vec::with_capacity(corners);
        let mut multi = vec![0; d];
        for c in 0..corners {
            let mut w = 1.0;
            for a in 0..d {
                let up = (c >> (d - 1 - a)) & 1 == 1;
                multi[a] = cell[a] + usize::from(up);
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            nodes.push(self.flat_index(&multi));
            weights.push(w);
        }
        Some(Stencil { nodes, weights })
    }

    /// Multilinear interpolation inside the grid box.
    pub fn interpolate_inside(&self, x: &[f64]) -> Option<f64> {
        self.stencil(x).map(|s| {
            s.nodes
                .iter()
                .zip(&s.weights)
                .map(|(n, w)| w * self.values[*n])
                .sum()
        })
    }

    /// Multilinear interpolation; outside the grid box the pessimistic
    /// terminal value `max{l(x), h(x)}`.
    pub fn interpolate(&self, x: &[f64], sets: &ConstraintSets) -> f64 {
        self.interpolate_inside(x)
            .unwrap_or_else(|| sets.l_margin(x).max(sets.h_margin(x)))
    }

    /// Binary layout, little endian: magic `RAGRID01`, `u32` dimension, per
    /// axis a `u32` node count followed by that many `f64` nodes, then the
    /// `f64` values row-major (last axis fastest).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for ax in &self.axes {
            w.write_all(&(ax.len() as u32).to_le_bytes())?;
            for v in ax {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::Format("not a grid value file".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 || dim > 16 {
            return Err(Error::Format(format!("implausible grid dimension {dim}")));
        }
        let mut axes = Vec::with_capacity(dim);
        for _ in 0..dim {
            let n = read_u32(&mut r)? as usize;
            axes.push((0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?);
        }
        let n: usize = axes.iter().map(Vec::len).product();
        let values = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        Self::new(axes, values)
    }

    /// CSV with one column per axis (`x1, x2, ...`) and `value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        wr.write_record(&header).map_err(csv_err)?;
        for i in 0..self.num_nodes() {
            let mut rec: Vec<String> = self.node(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.values[i].to_string());
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Largest nodewise `|self - other|`.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        sup_dist(&self.values, &other.values)
    }
}

const GRID_MAGIC: &[u8; 8] = b"RAGRID01";
const POLICY_MAGIC: &[u8; 8] = b"RAPOL001";

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Discount, finite action and disturbance sets, and stopping rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RAConfig {
    pub gamma: f64,
    pub actions: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    pub fixpoint_tol: f64,
    pub max_sweeps: usize,
}

impl RAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.actions.is_empty() || self.disturbances.is_empty() {
            return Err(Error::Config("action and disturbance sets must be nonempty".into()));
        }
        if !(self.fixpoint_tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::Config("tolerance and sweep limit must be positive".into()));
        }
        Ok(())
    }

    /// Checks that every action lies in `U` and every disturbance in `D`.
    pub fn validate_against(&self, sets: &ConstraintSets) -> Result<()> {
        self.validate()?;
        if let Some(u) = self.actions.iter().find(|u| !sets.input.contains(u, 1e-12)) {
            return Err(Error::Config(format!("action {u:?} lies outside U")));
        }
        if let Some(d) = self.disturbances.iter().find(|d| !sets.disturbance.contains(d, 1e-12)) {
            return Err(Error::Config(format!("disturbance {d:?} lies outside D")));
        }
        Ok(())
    }
}

/// `n` evenly spaced points on `[lo, hi]` per coordinate, as a lattice.
pub fn lattice(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for (a, b) in lo.iter().zip(hi) {
        let pts: Vec<f64> = if n <= 1 || a == b {
            vec![0.5 * (a + b)]
        } else {
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        };
        out = out
            .into_iter()
            .flat_map(|p| {
                pts.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Tabular policy: one index per node into the action (or disturbance) set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPolicy {
    choices: Vec<usize>,
    options: usize,
}

impl GridPolicy {
    pub fn new(choices: Vec<usize>, options: usize) -> Result<Self> {
        if let Some(c) = choices.iter().find(|c| **c >= options) {
            return Err(Error::Config(format!("policy index {c} out of range {options}")));
        }
        Ok(Self { choices, options })
    }

    pub fn constant(nodes: usize, choice: usize, options: usize) -> Result<Self> {
        Self::new(vec![choice; nodes], options)
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    pub fn options(&self) -> usize {
        self.options
    }

    /// Magic `RAPOL001`, `u32` option count, `u32` node count, then one
    /// `u32` index per node; little endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(POLICY_MAGIC)?;
        w.write_all(&(self.options as u32).to_le_bytes())?;
        w.write_all(&(self.choices.len() as u32).to_le_bytes())?;
        for c in &self.choices {
            w.write_all(&(*c as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != POLICY_MAGIC {
            return Err(Error::Format("not a grid policy file".into()));
        }
        let options = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let choices = (0..n)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        Self::new(choices, options)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyIterationOutput {
    pub policy: GridPolicy,
    pub value: GridValueFunction,
    /// `V^{pi_k}` for every evaluated policy.
    pub history: Vec<GridValueFunction>,
}

#[derive(Debug, Clone)]
pub struct ValueIterationOutput {
    pub value: GridValueFunction,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

/// A reach-avoid game on a grid with precomputed successor stencils.
#[derive(Debug, Clone)]
pub struct GridGame {
    template: GridValueFunction,
    sets: Option<ConstraintSets>,
    cfg: RAConfig,
    l: Vec<f64>,
    h: Vec<f64>,
    corners: usize,
    // successor s = (node * na + a) * nd + d
    idx: Vec<u32>,
    w: Vec<f64>,
    offset: Vec<f64>,
}

impl GridGame {
    /// Builds the game for `model` on `axes`, which should cover `X`.
    pub fn new(
        model: &DisturbedModel,
        sets: &ConstraintSets,
        axes: Vec<Vec<f64>>,
        cfg: RAConfig,
    ) -> Result<Self> {
        cfg.validate_against(sets)?;
        let n: usize = axes.iter().map(Vec::len).product();
        let template = GridValueFunction::new(axes, vec![0.0; n])?;
        if template.dim() != model.state_dim() {
            return Err(Error::Dimension("grid and model state dimensions differ".into()));
        }
        let (na, nd) = (cfg.actions.len(), cfg.disturbances.len());
        let corners = 1usize << template.dim();
        let per_node: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = template.node(i);
                let mut idx = Vec::with_capacity(na * nd * corners);
                let mut w = Vec::with_capacity(na * nd * corners);
                let mut off = Vec::with_capacity(na * nd);
                for u in &cfg.actions {
                    for d in &cfg.disturbances {
                        let next = model
                            .step_disturbed(&x, u, d)
                            .map(|v| v.iter().copied().collect::<Vec<f64>>())
                            .unwrap_or_else(|_| vec![f64::INFINITY; x.len()]);
                        match template.stencil(&next) {
                            Some(s) => {
                                idx.extend(s.nodes.iter().map(|v| *v as u32));
                                w.extend(s.weights);
                                off.push(0.0);
                            }
                            None => {
                                idx.extend(std::iter::repeat_n(0, corners));
                                w.extend(std::iter::repeat_n(0.0, corners));
                                let m = if next.iter().all(|v| v.is_finite()) {
                                    sets.l_margin(&next).max(sets.h_margin(&next))
                                } else {
                                    f64::MAX
                                };
                                off.push(m);
                            }
                        }
                    }
                }
                (idx, w, off)
            })
            .collect();
        let mut game = Self {
            l: (0..n).map(|i| sets.l_margin(&template.node(i))).collect(),
            h: (0..n).map(|i| sets.h_margin(&template.node(i))).collect(),
            template,
            sets: Some(sets.clone()),
            cfg,
            corners,
            idx: Vec::with_capacity(n * na * nd * corners),
            w: Vec::with_capacity(n * na * nd * corners),
            offset: Vec::with_capacity(n * na * nd),
        };
        for (idx, w, off) in per_node {
            game.idx.extend(idx);
            game.w.extend(w);
            game.offset.extend(off);
        }
        Ok(game)
    }

    /// A finite game given by tables: node margins `l`, `h` and successor
    /// nodes `next[(node * na + a) * nd + d]`. Only `gamma`, the tolerances
    /// and the set sizes of `cfg` are used.
    pub fn from_tables(l: Vec<f64>, h: Vec<f64>, next: Vec<usize>, cfg: RAConfig) -> Result<Self> {
        cfg.validate()?;
        let n = l.len();
        let (na, nd) = (cfg.actions.len(), cfg.disturbances.len());
        if h.len() != n || next.len() != n * na * nd || next.iter().any(|s| *s >= n) || n < 2 {
            return Err(Error::Dimension("inconsistent finite game tables".into()));
        }
        let template = GridValueFunction::new(vec![(0..n).map(|i| i as f64).collect()], vec![0.0; n])?;
        let mut idx = Vec::with_capacity(2 * next.len());
        let mut w = Vec::with_capacity(2 * next.len());
        for s in &next {
            idx.extend([*s as u32, *s as u32]);
            w.extend([1.0, 0.0]);
        }
        Ok(Self {
            template,
            sets: None,
            cfg,
            l,
            h,
            corners: 2,
            idx,
            w,
            offset: vec![0.0; next.len()],
        })
    }

    pub fn config(&self) -> &RAConfig {
        &self.cfg
    }

    pub fn num_nodes(&self) -> usize {
        self.l.len()
    }

    pub fn template(&self) -> &GridValueFunction {
        &self.template
    }

    pub fn l_margins(&self) -> &[f64] {
        &self.l
    }

    pub fn h_margins(&self) -> &[f64] {
        &self.h
    }

    /// `V_0 = max{l, h}` at every node.
    pub fn initial_value(&self) -> GridValueFunction {
        let v = self.l.iter().zip(&self.h).map(|(l, h)| l.max(*h)).collect();
        GridValueFunction {
            axes: self.template.axes.clone(),
            values: v,
        }
    }

    #[inline]
    fn succ_value(&self, v: &[f64], s: usize) -> f64 {
        let base = s * self.corners;
        let mut acc = self.offset[s];
        for c in 0..self.corners {
            acc += self.w[base + c] * v[self.idx[base + c] as usize];
        }
        acc
    }

    #[inline]
    fn backup(&self, i: usize, q: f64) -> f64 {
        let (l, h, g) = (self.l[i], self.h[i], self.cfg.gamma);
        (1.0 - g) * l.max(h) + g * h.max(l.min(q))
    }

    fn worst_case(&self, v: &[f64], i: usize, a: usize) -> (f64, usize) {
        let nd = self.cfg.disturbances.len();
        let base = (i * self.cfg.actions.len() + a) * nd;
        let mut best = (f64::NEG_INFINITY, 0);
        for d in 0..nd {
            let q = self.succ_value(v, base + d);
            if q > best.0 {
                best = (q, d);
            }
        }
        best
    }

    fn best_action(&self, v: &[f64], i: usize) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for a in 0..self.cfg.actions.len() {
            let q = self.worst_case(v, i, a).0;
            if q < best.0 {
                best = (q, a);
            }
        }
        best
    }

    fn sweep(&self, f: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
        (0..self.num_nodes()).into_par_iter().map(|i| self.backup(i, f(i))).collect()
    }

    fn check(&self, v: &GridValueFunction) -> Result<()> {
        if v.num_nodes() != self.num_nodes() {
            return Err(Error::Dimension("value function does not match the grid".into()));
        }
        Ok(())
    }

    fn check_policy(&self, p: &GridPolicy, options: usize) -> Result<()> {
        if p.choices.len() != self.num_nodes() || p.options != options {
            return Err(Error::Dimension("policy does not match the grid".into()));
        }
        Ok(())
    }

    fn wrap(&self, values: Vec<f64>) -> GridValueFunction {
        GridValueFunction {
            axes: self.template.axes.clone(),
            values,
        }
    }

    /// `T_ra(V)`: min over actions, max over disturbances.
    pub fn apply_t(&self, v: &GridValueFunction) -> Result<GridValueFunction> {
        self.check(v)?;
        let vals = &v.values;
        Ok(self.wrap(self.sweep(|i| self.best_action(vals, i).0)))
    }

    /// `T_ra^pi(V)`: max over disturbances with `u = pi(x)`.
    pub fn apply_t_pi(&self, v: &GridValueFunction, pi: &GridPolicy) -> Result<GridValueFunction> {
        self.check(v)?;
        self.check_policy(pi, self.cfg.actions.len())?;
        let vals = &v.values;
        Ok(self.wrap(self.sweep(|i| self.worst_case(vals, i, pi.choices[i]).0)))
    }

    /// `T_ra^{pi,mu}(V)`: the successor under `u = pi(x)`, `d = mu(x)`.
    pub fn apply_t_pi_mu(
        &self,
        v: &GridValueFunction,
        pi: &GridPolicy,
        mu: &GridPolicy,
    ) -> Result<GridValueFunction> {
        self.check(v)?;
        self.check_policy(pi, self.cfg.actions.len())?;
        self.check_policy(mu, self.cfg.disturbances.len())?;
        let nd = self.cfg.disturbances.len();
        let na = self.cfg.actions.len();
        let vals = &v.values;
        Ok(self.wrap(self.sweep(|i| {
            self.succ_value(vals, (i * na + pi.choices[i]) * nd + mu.choices[i])
        })))
    }

    fn fixed_point(
        &self,
        init: GridValueFunction,
        op: impl Fn(&GridValueFunction) -> Result<GridValueFunction>,
        residuals: &mut Vec<f64>,
    ) -> Result<GridValueFunction> {
        let mut v = init;
        for _ in 0..self.cfg.max_sweeps {
            let next = op(&v)?;
            let r = next.sup_distance(&v);
            residuals.push(r);
            v = next;
            if r < self.cfg.fixpoint_tol {
                return Ok(v);
            }
        }
        Err(Error::NonConvergence {
            sweeps: self.cfg.max_sweeps,
            residual: residuals.last().copied().unwrap_or(f64::NAN),
        })
    }

    /// Fixed point of `T_ra^pi`, iterated from `init` (default `max{l, h}`).
    pub fn policy_evaluation(
        &self,
        pi: &GridPolicy,
        init: Option<&GridValueFunction>,
    ) -> Result<GridValueFunction> {
        let start = init.cloned().unwrap_or_else(|| self.initial_value());
        self.check(&start)?;
        self.fixed_point(start, |v| self.apply_t_pi(v, pi), &mut Vec::new())
    }

    /// Fixed point of `T_ra^{pi,mu}` from `max{l, h}`.
    pub fn pair_evaluation(&self, pi: &GridPolicy, mu: &GridPolicy) -> Result<GridValueFunction> {
        self.fixed_point(self.initial_value(), |v| self.apply_t_pi_mu(v, pi, mu), &mut Vec::new())
    }

    /// Greedy protagonist policy; ties go to the lowest action index.
    pub fn policy_improvement(&self, v: &GridValueFunction) -> Result<GridPolicy> {
        self.check(v)?;
        let choices = (0..self.num_nodes())
            .into_par_iter()
            .map(|i| self.best_action(&v.values, i).1)
            .collect();
        GridPolicy::new(choices, self.cfg.actions.len())
    }

    /// Worst-case disturbance index per node for `pi`; ties go to the lowest
    /// index.
    pub fn worst_disturbance(&self, v: &GridValueFunction, pi: &GridPolicy) -> Result<GridPolicy> {
        self.check(v)?;
        self.check_policy(pi, self.cfg.actions.len())?;
        let choices = (0..self.num_nodes())
            .map(|i| self.worst_case(&v.values, i, pi.choices[i]).1)
            .collect();
        GridPolicy::new(choices, self.cfg.disturbances.len())
    }

    /// Alternates evaluation and improvement until `V` moves less than the
    /// tolerance. Each evaluation starts from the previous value function,
    /// so the history decreases nodewise.
    pub fn policy_iteration(&self, pi0: &GridPolicy) -> Result<PolicyIterationOutput> {
        self.check_policy(pi0, self.cfg.actions.len())?;
        let mut pi = pi0.clone();
        let mut v = self.policy_evaluation(&pi, None)?;
        let mut history = vec![v.clone()];
        for _ in 0..self.cfg.max_sweeps {
            pi = self.policy_improvement(&v)?;
            let next = self.policy_evaluation(&pi, Some(&v))?;
            let change = next.sup_distance(&v);
            history.push(next.clone());
            v = next;
            if change < self.cfg.fixpoint_tol {
                return Ok(PolicyIterationOutput {
                    policy: pi,
                    value: v,
                    history,
                });
            }
        }
        Err(Error::NonConvergence {
            sweeps: self.cfg.max_sweeps,
            residual: self.residual(&v)?,
        })
    }

    /// Iterates `T_ra` from `max{l, h}`.
    pub fn value_iteration(&self) -> Result<ValueIterationOutput> {
        let mut residuals = Vec::new();
        let value = self.fixed_point(self.initial_value(), |v| self.apply_t(v), &mut residuals)?;
        Ok(ValueIterationOutput { value, residuals })
    }

    /// `||T_ra(V) - V||_inf`.
    pub fn residual(&self, v: &GridValueFunction) -> Result<f64> {
        Ok(self.apply_t(v)?.sup_distance(v))
    }

    /// Interpolated value with the off-grid convention of the game's sets.
    pub fn interpolate(&self, v: &GridValueFunction, x: &[f64]) -> f64 {
        match &self.sets {
            Some(s) => v.interpolate(x, s),
            None => v.interpolate_inside(x).unwrap_or(f64::INFINITY),
        }
    }
}

/// One-step greedy policy on an interpolated value function: the action
/// minimizing the worst successor value.
pub struct GreedyPolicy {
    pub model: DisturbedModel,
    pub sets: ConstraintSets,
    pub value: GridValueFunction,
    pub actions: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
}

impl Policy for GreedyPolicy {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        let mut best = (f64::INFINITY, 0);
        for (a, u) in self.actions.iter().enumerate() {
            let worst = self
                .disturbances
                .iter()
                .map(|d| match self.model.step_disturbed(x, u, d) {
                    Ok(n) => self.value.interpolate(n.as_slice(), &self.sets),
                    Err(_) => f64::INFINITY,
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if worst < best.0 {
                best = (worst, a);
            }
        }
        self.actions[best.1].clone()
    }
}

/// Pendulum-style action grid: `n` evenly spaced inputs on the input box.
pub fn action_grid(sets: &ConstraintSets, n: usize) -> Result<Vec<Vec<f64>>> {
    let (lo, hi) = sets.input.bounding_box()?;
    Ok(lattice(&lo, &hi, n))
}

/// Fraction of nodes with `V <= 0`.
pub fn zero_sublevel_fraction(v: &GridValueFunction) -> f64 {
    v.values.iter().filter(|x| **x <= 0.0).count() as f64 / v.num_nodes() as f64
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{pendulum_problem, Pendulum};

    fn pendulum_game(n: usize, actions: usize, gamma: f64) -> GridGame {
        let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let (lo, hi) = sets.state.bounding_box().unwrap();
        let axes = GridValueFunction::uniform(&lo, &hi, &[n, n]).unwrap().axes().to_vec();
        let cfg = RAConfig {
            gamma,
            actions: action_grid(&sets, actions).unwrap(),
            disturbances: sets.disturbance.vertices().unwrap(),
            fixpoint_tol: 1e-9,
            max_sweeps: 200_000,
        };
        GridGame::new(&m, &sets, axes, cfg).unwrap()
    }

    #[test]
    fn node_interpolation_is_exact() {
        let mut g = GridValueFunction::uniform(&[0.0, -1.0], &[1.0, 1.0], &[3, 4]).unwrap();
        g.values = (0..12).map(|i| (i as f64).sin()).collect();
        for i in 0..12 {
            assert_eq!(g.interpolate_inside(&g.node(i)).unwrap(), g.values[i]);
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let g = GridValueFunction::new(vec![vec![0.0, 2.0], vec![0.0, 1.0]], vec![1.0, 2.0, 3.0, 10.0]).unwrap();
        assert!((g.interpolate_inside(&[1.0, 0.5]).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn off_grid_value_is_positive_outside_x() {
        let (_, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let g = GridValueFunction::uniform(&[-1.0, -2.0], &[1.0, 2.0], &[5, 5]).unwrap();
        let x = [1.6, 0.0];
        let v = g.interpolate(&x, &sets);
        assert!(sets.h_margin(&x) > 0.0);
        assert_eq!(v, sets.l_margin(&x).max(sets.h_margin(&x)));
        assert!(v >= 1.6 - std::f64::consts::FRAC_PI_3);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(GridValueFunction::new(vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GridValueFunction::new(vec![vec![0.0, 0.0]], vec![0.0, 0.0]).is_err());
        assert!(GridValueFunction::new(vec![vec![0.0, 1.0]], vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn constant_value_single_node_closed_form() {
        let game = pendulum_game(9, 3, 0.9);
        let c = -0.05;
        let v = game.template().with_values(vec![c; 81]).unwrap();
        let tv = game.apply_t(&v).unwrap();
        // center node: all successors stay inside the grid, so Q = c
        let i = 40;
        let (l, h) = (game.l[i], game.h[i]);
        let expected = 0.1 * l.max(h) + 0.9 * h.max(l.min(c));
        assert!((tv.values[i] - expected).abs() < 1e-15);
    }

    #[test]
    fn operators_contract_and_are_monotone() {
        let game = pendulum_game(5, 3, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pi = GridPolicy::new((0..25).map(|i| i % 3).collect(), 3).unwrap();
        let mu = GridPolicy::new((0..25).map(|i| i % 8).collect(), 8).unwrap();
        for _ in 0..20 {
            let a: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let va = game.template().with_values(a.clone()).unwrap();
            let vb = game.template().with_values(b).unwrap();
            let hi = game
                .template()
                .with_values(a.iter().map(|v| v + rng.gen_range(0.0..0.5)).collect())
                .unwrap();
            let dist = va.sup_distance(&vb);
            for (x, y, up) in [
                (game.apply_t(&va).unwrap(), game.apply_t(&vb).unwrap(), game.apply_t(&hi).unwrap()),
                (
                    game.apply_t_pi(&va, &pi).unwrap(),
                    game.apply_t_pi(&vb, &pi).unwrap(),
                    game.apply_t_pi(&hi, &pi).unwrap(),
                ),
                (
                    game.apply_t_pi_mu(&va, &pi, &mu).unwrap(),
                    game.apply_t_pi_mu(&vb, &pi, &mu).unwrap(),
                    game.apply_t_pi_mu(&hi, &pi, &mu).unwrap(),
                ),
            ] {
                assert!(x.sup_distance(&y) <= 0.9 * dist + 1e-12);
                let base = x;
                assert!(up.values.iter().zip(&base.values).all(|(u, b)| *u >= *b));
            }
        }
    }

    #[test]
    fn evaluation_exit_residual_below_tolerance() {
        let game = pendulum_game(7, 3, 0.9);
        let pi = GridPolicy::constant(49, 1, 3).unwrap();
        let v = game.policy_evaluation(&pi, None).unwrap();
        let r = game.apply_t_pi(&v, &pi).unwrap().sup_distance(&v);
        assert!(r < 1e-9, "{r}");
    }

    #[test]
    fn improvement_attains_optimal_operator() {
        let game = pendulum_game(7, 5, 0.95);
        let pi = GridPolicy::constant(49, 0, 5).unwrap();
        let v = game.policy_evaluation(&pi, None).unwrap();
        let next = game.policy_improvement(&v).unwrap();
        assert_eq!(game.apply_t(&v).unwrap(), game.apply_t_pi(&v, &next).unwrap());
    }

    #[test]
    fn single_action_improvement_is_identity() {
        let game = pendulum_game(5, 1, 0.9);
        let pi = GridPolicy::constant(25, 0, 1).unwrap();
        let v = game.policy_evaluation(&pi, None).unwrap();
        assert_eq!(game.policy_improvement(&v).unwrap(), pi);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let game = pendulum_game(5, 3, 0.9);
        let flat = game.template().with_values(vec![0.0; 25]).unwrap();
        let p = game.policy_improvement(&flat).unwrap();
        // the origin node: every successor stays on the grid, all actions tie
        assert_eq!(game.template().node(12), vec![0.0, 0.0]);
        assert_eq!(p.choices()[12], 0);
    }

    #[test]
    fn absorbing_target_is_negative() {
        // x' = x: every node stays put, no avoid region in reach
        let n = 5;
        let cfg = RAConfig {
            gamma: 0.99,
            actions: vec![vec![0.0]],
            disturbances: vec![vec![0.0]],
            fixpoint_tol: 1e-12,
            max_sweeps: 100_000,
        };
        let l: Vec<f64> = (0..n).map(|i| if i == 2 { -0.5 } else { 0.5 }).collect();
        let h = vec![-10.0; n];
        let game = GridGame::from_tables(l, h, (0..n).collect(), cfg).unwrap();
        let out = game.value_iteration().unwrap();
        assert!(out.value.values()[2] < 0.0);
        assert!(out.value.values()[0] > 0.0);
    }

    #[test]
    fn residuals_follow_contraction_envelope() {
        let game = pendulum_game(9, 3, 0.9);
        let out = game.value_iteration().unwrap();
        let r0 = out.residuals[0];
        for (k, r) in out.residuals.iter().enumerate() {
            assert!(*r <= 0.9f64.powi(k as i32) * r0 / (1.0 - 0.9) + 1e-15);
        }
    }

    #[test]
    fn binary_round_trip() {
        let game = pendulum_game(5, 3, 0.9);
        let v = game.value_iteration().unwrap().value;
        let mut buf = Vec::new();
        v.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 2 * (4 + 5 * 8) + 25 * 8);
        assert_eq!(GridValueFunction::read_binary(&buf[..]).unwrap(), v);
        let p = game.policy_improvement(&v).unwrap();
        let mut pb = Vec::new();
        p.write_binary(&mut pb).unwrap();
        assert_eq!(GridPolicy::read_binary(&pb[..]).unwrap(), p);
        assert!(GridValueFunction::read_binary(&pb[..]).is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_node() {
        let g = GridValueFunction::uniform(&[0.0, 0.0], &[1.0, 1.0], &[2, 3]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,value");
        assert_eq!(lines.len(), 7);
    }

    #[test]
    fn config_validation() {
        let (_, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let mut cfg = RAConfig {
            gamma: 0.9,
            actions: vec![vec![0.0]],
            disturbances: vec![vec![0.0, 0.0, 0.0]],
            fixpoint_tol: 1e-9,
            max_sweeps: 10,
        };
        assert!(cfg.validate_against(&sets).is_ok());
        cfg.actions.push(vec![6.0]);
        assert!(cfg.validate_against(&sets).is_err());
        cfg.actions.pop();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_limit_reports_residual() {
        let mut game = pendulum_game(5, 3, 0.999);
        game.cfg.max_sweeps = 3;
        match game.value_iteration() {
            Err(Error::NonConvergence { sweeps, residual }) => {
                assert_eq!(sweeps, 3);
                assert!(residual > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
