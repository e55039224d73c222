//! A small conic-program container: linear objective, equality rows,
//! `<=` rows and second-order cones, with a Clarabel backend, an independent
//! feasibility re-check and a plain-text sparse-triplet dump.
//!
//! Dump format (whitespace separated, `#` starts a comment line):
//!
//! ```text
//! conic-program v1
//! vars <n>
//! objective <k>            followed by k lines: <var> <coef>
//! rows <m>                 followed by m lines: <row> <kind> <rhs> <group>
//! entries <nnz>            followed by nnz lines: <row> <var> <value>
//! ```
//!
//! `kind` is `eq` (`a.x = rhs`), `le` (`a.x <= rhs`) or `socK:P`, the `P`-th
//! component (0-based) of second-order cone number `K`, meaning
//! `s = rhs - a.x` with `s_0 >= ||s_1..||_2`. Rows appear in solver order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Eq,
    Le,
    Soc,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|(j, a)| a * x[*j]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintGroup {
    pub label: String,
    pub kind: RowKind,
    /// For `Soc` groups, consecutive chunks of `cone_dim` rows form one cone.
    pub rows: Vec<LinearRow>,
    pub cone_dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    num_vars: usize,
    objective: Vec<(usize, f64)>,
    groups: Vec<ConstraintGroup>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Solved,
    Infeasible,
    SolverError,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub solve_time: f64,
    pub iterations: u32,
    pub raw_status: String,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverTolerances {
    pub feas: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub max_iter: u32,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            feas: 1e-8,
            gap_abs: 1e-8,
            gap_rel: 1e-8,
            max_iter: 200,
        }
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn add_vars(&mut self, n: usize) -> usize {
        let start = self.num_vars;
        self.num_vars += n;
        start
    }

    pub fn set_objective(&mut self, c: Vec<(usize, f64)>) {
        self.objective = c;
    }

    fn group_mut(&mut self, label: &str, kind: RowKind, cone_dim: usize) -> &mut ConstraintGroup {
        let key = format!("{label}/{kind:?}");
        let idx = match self.index.get(&key) {
            Some(&i) => i,
            None => {
                self.groups.push(ConstraintGroup {
                    label: label.to_string(),
                    kind,
                    rows: Vec::new(),
                    cone_dim,
                });
                self.index.insert(key, self.groups.len() - 1);
                self.groups.len() - 1
            }
        };
        &mut self.groups[idx]
    }

    pub fn add_eq(&mut self, label: &str, row: LinearRow) {
        self.group_mut(label, RowKind::Eq, 1).rows.push(row);
    }

    pub fn add_le(&mut self, label: &str, row: LinearRow) {
        self.group_mut(label, RowKind::Le, 1).rows.push(row);
    }

    /// One second-order cone `s = rhs - A x`, `s_0 >= ||s_{1..}||`.
    pub fn add_soc(&mut self, label: &str, rows: Vec<LinearRow>) {
        let dim = rows.len();
        let g = self.group_mut(label, RowKind::Soc, dim);
        assert_eq!(g.cone_dim, dim, "cones in one group must share a dimension");
        g.rows.extend(rows);
    }

    pub fn groups(&self) -> &[ConstraintGroup] {
        &self.groups
    }

    /// Number of rows in the group with this label (all kinds).
    pub fn row_count(&self, label: &str) -> usize {
        self.groups
            .iter()
            .filter(|g| g.label == label)
            .map(|g| g.rows.len())
            .sum()
    }

    fn ordered(&self) -> Vec<&ConstraintGroup> {
        let mut out: Vec<&ConstraintGroup> = Vec::new();
        for kind in [RowKind::Eq, RowKind::Le, RowKind::Soc] {
            out.extend(self.groups.iter().filter(|g| g.kind == kind));
        }
        out
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|(j, c)| c * x[*j]).sum()
    }

    /// Largest constraint violation at `x`, evaluated directly from the rows.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for g in &self.groups {
            match g.kind {
                RowKind::Eq => {
                    for r in &g.rows {
                        worst = worst.max((r.eval(x) - r.rhs).abs());
                    }
                }
                RowKind::Le => {
                    for r in &g.rows {
                        worst = worst.max(r.eval(x) - r.rhs);
                    }
                }
                RowKind::Soc => {
                    for cone in g.rows.chunks(g.cone_dim) {
                        let s: Vec<f64> = cone.iter().map(|r| r.rhs - r.eval(x)).collect();
                        let tail = s[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                        worst = worst.max(tail - s[0]);
                    }
                }
            }
        }
        worst
    }

    /// Per-group violation report `(label, worst violation)`.
    pub fn violation_by_group(&self, x: &[f64]) -> Vec<(String, f64)> {
        self.groups
            .iter()
            .map(|g| {
                let mut sub = ConicProgram::new();
                sub.num_vars = self.num_vars;
                sub.groups.push(g.clone());
                (g.label.clone(), sub.max_violation(x))
            })
            .collect()
    }

    pub fn to_triplet_text(&self) -> String {
        let mut s = String::new();
        let rows: Vec<(&ConstraintGroup, &[LinearRow], String)> = {
            let mut v = Vec::new();
            let mut cone_no = 0usize;
            for g in self.ordered() {
                match g.kind {
                    RowKind::Eq | RowKind::Le => {
                        let kind = if g.kind == RowKind::Eq { "eq" } else { "le" };
                        for r in &g.rows {
                            v.push((g, std::slice::from_ref(r), kind.to_string()));
                        }
                    }
                    RowKind::Soc => {
                        for cone in g.rows.chunks(g.cone_dim) {
                            for (p, r) in cone.iter().enumerate() {
                                v.push((g, std::slice::from_ref(r), format!("soc{cone_no}:{p}")));
                            }
                            cone_no += 1;
                        }
                    }
                }
            }
            v
        };
        let _ = writeln!(s, "conic-program v1");
        let _ = writeln!(s, "vars {}", self.num_vars);
        let _ = writeln!(s, "objective {}", self.objective.len());
        for (j, c) in &self.objective {
            let _ = writeln!(s, "{j} {c:e}");
        }
        let _ = writeln!(s, "rows {}", rows.len());
        for (i, (g, r, kind)) in rows.iter().enumerate() {
            let _ = writeln!(s, "{i} {kind} {:e} {}", r[0].rhs, g.label);
        }
        let nnz: usize = rows.iter().map(|(_, r, _)| r[0].coeffs.len()).sum();
        let _ = writeln!(s, "entries {nnz}");
        for (i, (_, r, _)) in rows.iter().enumerate() {
            for (j, a) in &r[0].coeffs {
                let _ = writeln!(s, "{i} {j} {a:e}");
            }
        }
        s
    }

    pub fn solve(&self, tol: &SolverTolerances) -> ConicSolution {
        let n = self.num_vars;
        let mut ii = Vec::new();
        let mut jj = Vec::new();
        let mut vv = Vec::new();
        let mut b = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut row = 0usize;
        for g in self.ordered() {
            for r in &g.rows {
                for (j, a) in &r.coeffs {
                    if *a != 0.0 {
                        ii.push(row);
                        jj.push(*j);
                        vv.push(*a);
                    }
                }
                b.push(r.rhs);
                row += 1;
            }
            match g.kind {
                RowKind::Eq => cones.push(SupportedConeT::ZeroConeT(g.rows.len())),
                RowKind::Le => cones.push(SupportedConeT::NonnegativeConeT(g.rows.len())),
                RowKind::Soc => {
                    for _ in 0..g.rows.len() / g.cone_dim {
                        cones.push(SupportedConeT::SecondOrderConeT(g.cone_dim));
                    }
                }
            }
        }
        let a = CscMatrix::new_from_triplets(row, n, ii, jj, vv);
        let p = CscMatrix::<f64>::zeros((n, n));
        let mut q = vec![0.0; n];
        for (j, c) in &self.objective {
            q[*j] += c;
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_feas(tol.feas)
            .tol_gap_abs(tol.gap_abs)
            .tol_gap_rel(tol.gap_rel)
            .max_iter(tol.max_iter)
            .build()
            .expect("valid solver settings");
        let start = Instant::now();
        let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => {
                return ConicSolution {
                    status: SolveStatus::SolverError,
                    x: vec![f64::NAN; n],
                    objective: f64::NAN,
                    solve_time: start.elapsed().as_secs_f64(),
                    iterations: 0,
                    raw_status: format!("setup error: {e:?}"),
                }
            }
        };
        solver.solve();
        let elapsed = start.elapsed().as_secs_f64();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SolveStatus::Solved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            _ => SolveStatus::SolverError,
        };
        ConicSolution {
            status,
            x: sol.x.clone(),
            objective: sol.obj_val,
            solve_time: elapsed,
            iterations: sol.iterations,
            raw_status: format!("{:?}", sol.status),
        }
    }
}
