//! Experiment harness: verified-set sweeps, timing statistics, oracle
//! comparison, contour plots and closed-loop runs.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{Branch, FilterState, SafetyFilter, StepTelemetry};
use crate::grid::{csv_err, GridValueFunction};
use crate::model::{ConstraintSets, DisturbedModel};
use crate::policy::{clip_to_box, Policy};
use crate::sls::socp::sample_disturbance;
use crate::sls::{SlsVerifier, VerificationStatus};

const TAIL: [&str; 5] = ["value", "solve_time", "status", "affine_residual", "realization_residual"];

/// One sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub x: Vec<f64>,
    pub value: f64,
    pub solve_time: f64,
    pub status: VerificationStatus,
    /// Affine-subspace and `K Phi_x - Phi_u` residuals; NaN unless solved.
    pub affine_residual: f64,
    pub realization_residual: f64,
}

impl SweepRow {
    pub fn verified(&self) -> bool {
        self.status == VerificationStatus::Solved && self.value <= 0.0
    }
}

/// Sweep results on a tensor grid, rows in row-major order (last axis
/// fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axes: Vec<Vec<f64>>,
    pub rows: Vec<SweepRow>,
}

/// Evenly spaced sweep axes over the bounding box of X, bounds included.
pub fn sweep_axes(sets: &ConstraintSets, shape: &[usize]) -> Result<Vec<Vec<f64>>> {
    let (lo, hi) = sets.state.bounding_box()?;
    if shape.len() != lo.len() {
        return Err(Error::Dimension("sweep shape does not match the state dimension".into()));
    }
    Ok(GridValueFunction::uniform(&lo, &hi, shape)?.axes().to_vec())
}

/// Verifies `u = policy(x)` at every grid node. Individual failures are
/// recorded as `solver-error` rows; the output order is the grid order
/// whatever the worker count.
pub fn sweep_safe_set(verifier: &SlsVerifier, policy: &dyn Policy, axes: Vec<Vec<f64>>) -> Result<SweepTable> {
    let template = GridValueFunction::new(axes.clone(), vec![0.0; axes.iter().map(Vec::len).product()])?;
    let (lo, hi) = verifier.sets().input.bounding_box()?;
    let rows = (0..template.num_nodes())
        .into_par_iter()
        .map(|i| {
            let x = template.node(i);
            let u = clip_to_box(&policy.act(&x), &lo, &hi);
            match verifier.verify(&x, &u, policy) {
                Ok(r) => SweepRow {
                    x,
                    value: r.value,
                    solve_time: r.solve_time,
                    status: r.status,
                    affine_residual: r.affine_residual,
                    realization_residual: r.realization_residual,
                },
                Err(_) => SweepRow {
                    x,
                    value: f64::INFINITY,
                    solve_time: 0.0,
                    status: VerificationStatus::SolverError,
                    affine_residual: f64::NAN,
                    realization_residual: f64::NAN,
                },
            }
        })
        .collect();
    Ok(SweepTable { axes, rows })
}

impl SweepTable {
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn verified_count(&self) -> usize {
        self.rows.iter().filter(|r| r.verified()).count()
    }

    /// Signed field for plotting and comparison: unverified points that
    /// carry no finite value are mapped to `+1`.
    pub fn field(&self) -> Result<GridValueFunction> {
        let values = self
            .rows
            .iter()
            .map(|r| match (r.verified(), r.value.is_finite()) {
                (true, _) => r.value.min(0.0),
                (false, true) => r.value.max(f64::MIN_POSITIVE),
                (false, false) => 1.0,
            })
            .collect();
        GridValueFunction::new(self.axes.clone(), values)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.axes.len()).map(|i| format!("x{i}")).collect();
        header.extend(TAIL.map(String::from));
        wr.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
            rec.push(r.value.to_string());
            rec.push(r.solve_time.to_string());
            rec.push(r.status.as_str().to_string());
            rec.push(r.affine_residual.to_string());
            rec.push(r.realization_residual.to_string());
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parses a sweep CSV; row numbers in errors count data rows from 1.
    /// The residual columns are optional.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| Error::Parse {
            row: 0,
            detail: e.to_string(),
        })?;
        let dim = header.iter().position(|h| h == "value").filter(|d| *d > 0).ok_or(Error::Parse {
            row: 0,
            detail: "expected state columns followed by value, solve_time, status".into(),
        })?;
        let width = header.len();
        if !(width == dim + 3 || width == dim + TAIL.len()) || header.iter().skip(dim).zip(TAIL).any(|(h, t)| h != t) {
            return Err(Error::Parse {
                row: 0,
                detail: format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>()),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let row = i + 1;
            let bad = |detail: String| Error::Parse { row, detail };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != width {
                return Err(bad(format!("expected {width} fields, found {}", rec.len())));
            }
            let num = |j: usize| -> Result<f64> {
                rec[j].trim().parse::<f64>().map_err(|e| bad(format!("column {}: {e}", j + 1)))
            };
            let x = (0..dim).map(num).collect::<Result<Vec<_>>>()?;
            let opt = |j: usize| if j < width { num(j) } else { Ok(f64::NAN) };
            rows.push(SweepRow {
                x,
                value: num(dim)?,
                solve_time: num(dim + 1)?,
                status: rec[dim + 2].trim().parse().map_err(|e: Error| bad(e.to_string()))?,
                affine_residual: opt(dim + 3)?,
                realization_residual: opt(dim + 4)?,
            });
        }
        let mut axes = vec![Vec::<f64>::new(); dim];
        for r in &rows {
            for (a, v) in axes.iter_mut().zip(&r.x) {
                if !a.contains(v) {
                    a.push(*v);
                }
            }
        }
        for a in &mut axes {
            a.sort_by(f64::total_cmp);
        }
        let template = GridValueFunction::new(axes.clone(), vec![0.0; axes.iter().map(Vec::len).product()])
            .map_err(|e| Error::Parse {
                row: 0,
                detail: format!("points do not form a tensor grid: {e}"),
            })?;
        if template.num_nodes() != rows.len() {
            return Err(Error::Parse {
                row: rows.len(),
                detail: "points do not form a complete tensor grid".into(),
            });
        }
        for (i, r) in rows.iter().enumerate() {
            if template.node(i) != r.x {
                return Err(Error::Parse {
                    row: i + 1,
                    detail: "rows are not in grid order".into(),
                });
            }
        }
        Ok(Self { axes, rows })
    }
}

/// Summary of solve times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`), 0 for a single row.
    pub std: f64,
    pub max: f64,
}

pub fn timing_stats(times: &[f64]) -> TimingStats {
    let n = times.len();
    if n == 0 {
        return TimingStats {
            count: 0,
            mean: f64::NAN,
            std: f64::NAN,
            max: f64::NAN,
        };
    }
    let mean = times.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    TimingStats {
        count: n,
        mean,
        std: var.sqrt(),
        max: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Solve-time statistics over the solved rows of a sweep.
pub fn timing_report(table: &SweepTable) -> TimingStats {
    let times: Vec<f64> = table
        .rows
        .iter()
        .filter(|r| r.status == VerificationStatus::Solved)
        .map(|r| r.solve_time)
        .collect();
    timing_stats(&times)
}

/// Verified sweep points against the grid-DP oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub verified: usize,
    /// Sweep nodes where the interpolated oracle is `<= 0`.
    pub oracle: usize,
    pub ratio: f64,
    /// Verified points outside the oracle set dilated by one sweep cell.
    pub exceptions: Vec<Vec<f64>>,
}

/// Compares the verified set with the oracle's zero sublevel set resampled
/// to the sweep nodes. The dilation adds every node with an oracle node
/// among its `3^n - 1` neighbours.
pub fn coverage(table: &SweepTable, oracle: &GridValueFunction, sets: &ConstraintSets) -> Result<CoverageReport> {
    let grid = GridValueFunction::new(table.axes.clone(), vec![0.0; table.rows.len()])?;
    let inside: Vec<bool> = (0..grid.num_nodes())
        .map(|i| oracle.interpolate(&grid.node(i), sets) <= 0.0)
        .collect();
    let shape = grid.shape();
    let dilated = |i: usize| -> bool {
        let m = grid.multi_index(i);
        let mut offs = vec![-1i64; m.len()];
        loop {
            let nb: Option<Vec<usize>> = m
                .iter()
                .zip(&offs)
                .zip(&shape)
                .map(|((c, o), n)| {
                    let v = *c as i64 + o;
                    (v >= 0 && v < *n as i64).then_some(v as usize)
                })
                .collect();
            if nb.is_some_and(|nb| inside[grid.flat_index(&nb)]) {
                return true;
            }
            let mut a = 0;
            while a < offs.len() && offs[a] == 1 {
                offs[a] = -1;
                a += 1;
            }
            if a == offs.len() {
                return false;
            }
            offs[a] += 1;
        }
    };
    let verified = table.verified_count();
    let oracle_count = inside.iter().filter(|b| **b).count();
    let exceptions = table
        .rows
        .iter()
        .enumerate()
        .filter(|(i, r)| r.verified() && !dilated(*i))
        .map(|(_, r)| r.x.clone())
        .collect();
    Ok(CoverageReport {
        verified,
        oracle: oracle_count,
        ratio: if oracle_count == 0 {
            f64::NAN
        } else {
            verified as f64 / oracle_count as f64
        },
        exceptions,
    })
}

/// Line segments of the zero level set of a 2-D field, `<= 0` inside.
///
/// The field is padded with a strongly positive ring so that a region
/// touching the grid boundary is closed along it.
pub fn zero_contour(field: &GridValueFunction) -> Result<Vec<[[f64; 2]; 2]>> {
    if field.dim() != 2 {
        return Err(Error::Dimension("contours need a 2-D field".into()));
    }
    const PAD: f64 = 1e12;
    let pad_axis = |a: &[f64]| -> Vec<f64> {
        let n = a.len();
        let mut out = vec![a[0] - (a[1] - a[0])];
        out.extend_from_slice(a);
        out.push(a[n - 1] + (a[n - 1] - a[n - 2]));
        out
    };
    let (ax, ay) = (pad_axis(&field.axes()[0]), pad_axis(&field.axes()[1]));
    let (nx, ny) = (ax.len(), ay.len());
    let f = |i: usize, j: usize| -> f64 {
        if i == 0 || j == 0 || i == nx - 1 || j == ny - 1 {
            PAD
        } else {
            field.values()[(i - 1) * (ny - 2) + (j - 1)].clamp(-PAD, PAD)
        }
    };
    let mut segs = Vec::new();
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            // corners counter-clockwise from (i, j)
            let c = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v: Vec<f64> = c.iter().map(|&(a, b)| f(a, b)).collect();
            let ins: Vec<bool> = v.iter().map(|x| *x <= 0.0).collect();
            let cross = |e: usize| -> [f64; 2] {
                let (p, q) = (e, (e + 1) % 4);
                let t = (v[p] / (v[p] - v[q])).clamp(0.0, 1.0);
                let (pa, pb) = c[p];
                let (qa, qb) = c[q];
                [ax[pa] + t * (ax[qa] - ax[pa]), ay[pb] + t * (ay[qb] - ay[pb])]
            };
            let edges: Vec<usize> = (0..4).filter(|&e| ins[e] != ins[(e + 1) % 4]).collect();
            match edges.len() {
                2 => segs.push([cross(edges[0]), cross(edges[1])]),
                4 => {
                    let centre = v.iter().sum::<f64>() / 4.0 <= 0.0;
                    // cut off each corner that disagrees with the centre
                    for k in 0..4 {
                        if ins[k] != centre {
                            segs.push([cross((k + 3) % 4), cross(k)]);
                        }
                    }
                }
                _ => {}
            }
        }
    }
    Ok(segs)
}

/// SVG with the zero contours of the verified set and of the oracle.
pub fn emit_contour(table: &SweepTable, oracle: &GridValueFunction) -> Result<String> {
    if table.axes.len() != 2 || oracle.dim() != 2 {
        return Err(Error::Dimension("contour plots need 2-D grids".into()));
    }
    let sweep = zero_contour(&table.field()?)?;
    let reference = zero_contour(oracle)?;
    let lo: Vec<f64> = (0..2).map(|a| table.axes[a][0].min(oracle.axes()[a][0])).collect();
    let hi: Vec<f64> = (0..2)
        .map(|a| table.axes[a].last().unwrap().max(*oracle.axes()[a].last().unwrap()))
        .collect();
    let (w, h, m) = (640.0, 480.0, 60.0);
    let px = |x: f64| m + (x - lo[0]) / (hi[0] - lo[0]) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - lo[1]) / (hi[1] - lo[1]) * (h - 2.0 * m);
    let path = |segs: &[[[f64; 2]; 2]]| -> String {
        let mut d = String::new();
        for [a, b] in segs {
            let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", px(a[0]), py(a[1]), px(b[0]), py(b[1]));
        }
        d
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * m,
        h - 2.0 * m
    );
    for a in 0..2 {
        for t in [lo[a], 0.5 * (lo[a] + hi[a]), hi[a]] {
            let (x, y, anchor) = if a == 0 {
                (px(t), h - m + 18.0, "middle")
            } else {
                (m - 6.0, py(t) + 4.0, "end")
            };
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{y:.2}" font-size="12" text-anchor="{anchor}">{t:.2}</text>"#
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="14" text-anchor="middle">x₁ (rad)</text>"#,
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-size="14" text-anchor="middle" transform="rotate(-90 16 {:.2})">x₂ (rad/s)</text>"#,
        h / 2.0,
        h / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path id="oracle" d="{}" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
        path(&reference)
    );
    let _ = writeln!(
        s,
        r#"<path id="verified" d="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        path(&sweep)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="steelblue">verified (learned policy)</text>"#,
        m + 10.0,
        m + 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12">grid DP oracle (dashed)</text>"#,
        m + 10.0,
        m + 34.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopConfig {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub vertex_bias: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopReport {
    pub telemetry: Vec<StepTelemetry>,
    /// `x_0..x_N`.
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// States with `h(x) > 0`.
    pub violations: usize,
    pub max_h: f64,
    pub inputs_outside_u: usize,
    pub verified_steps: usize,
    pub tracking_steps: usize,
    pub terminal_steps: usize,
    pub clipped_steps: usize,
    pub timing: TimingStats,
}

/// Runs the filter in closed loop under `nominal` and vertex-biased
/// disturbances. An infeasible first verification is returned as an error.
pub fn closed_loop_experiment(
    filter: &SafetyFilter,
    model: &DisturbedModel,
    sets: &ConstraintSets,
    nominal: &dyn Policy,
    cfg: &ClosedLoopConfig,
) -> Result<ClosedLoopReport> {
    let d_vertices = sets.disturbance.vertices()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = FilterState::new();
    let mut x = cfg.x0.clone();
    let mut report = ClosedLoopReport {
        telemetry: Vec::with_capacity(cfg.steps),
        states: vec![x.clone()],
        inputs: Vec::with_capacity(cfg.steps),
        violations: usize::from(sets.h_margin(&x) > 0.0),
        max_h: sets.h_margin(&x),
        inputs_outside_u: 0,
        verified_steps: 0,
        tracking_steps: 0,
        terminal_steps: 0,
        clipped_steps: 0,
        timing: timing_stats(&[]),
    };
    for _ in 0..cfg.steps {
        let (u, next_state, tel) = filter.step(state, &x, &nominal.act(&x))?;
        state = next_state;
        match tel.branch {
            Branch::Verified => report.verified_steps += 1,
            Branch::Tracking => report.tracking_steps += 1,
            Branch::Terminal => report.terminal_steps += 1,
        }
        report.clipped_steps += usize::from(tel.clipped);
        report.inputs_outside_u += usize::from(!sets.input.contains(&u, 1e-12));
        let d = sample_disturbance(&sets.disturbance, &d_vertices, cfg.vertex_bias, &mut rng);
        x = model.step_disturbed(&x, &u, &d)?.iter().copied().collect();
        let h = sets.h_margin(&x);
        report.max_h = report.max_h.max(h);
        report.violations += usize::from(h > 0.0);
        report.telemetry.push(tel);
        report.inputs.push(u);
        report.states.push(x.clone());
    }
    let times: Vec<f64> = report
        .telemetry
        .iter()
        .filter(|t| t.status == VerificationStatus::Solved.as_str())
        .map(|t| t.solve_time)
        .collect();
    report.timing = timing_stats(&times);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(values: &[f64], nx: usize, ny: usize) -> SweepTable {
        let g = GridValueFunction::uniform(&[-1.0, -2.0], &[1.0, 2.0], &[nx, ny]).unwrap();
        SweepTable {
            axes: g.axes().to_vec(),
            rows: (0..g.num_nodes())
                .map(|i| SweepRow {
                    x: g.node(i),
                    value: values[i],
                    solve_time: 0.1 + 0.01 * i as f64,
                    status: VerificationStatus::Solved,
                    affine_residual: 1e-13,
                    realization_residual: 2e-13,
                })
                .collect(),
        }
    }

    #[test]
    fn single_row_timing() {
        let s = timing_stats(&[0.25]);
        assert_eq!((s.mean, s.max, s.std), (0.25, 0.25, 0.0));
    }

    #[test]
    fn timing_by_hand() {
        let t = [0.12, 0.15, 0.11, 0.2, 0.14, 0.13, 0.18, 0.16, 0.1, 0.21];
        let s = timing_stats(&t);
        // sum 1.50, squared deviations sum 0.0126
        assert!((s.mean - 0.15).abs() < 1e-15);
        assert!((s.std - (0.0126f64 / 9.0).sqrt()).abs() < 1e-12);
        assert_eq!(s.max, 0.21);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let mut t = table(&[-1.0, 0.5, 2.0, -0.1, 0.0, 3.0], 2, 3);
        t.rows[2].status = VerificationStatus::Rejected;
        t.rows[2].value = f64::INFINITY;
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,value,solve_time,status,affine_residual,realization_residual\n"));
        assert_eq!(SweepTable::read_csv(text.as_bytes()).unwrap(), t);

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace("solved", "sovled");
        let broken = lines.join("\n");
        match SweepTable::read_csv(broken.as_bytes()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected a parse error, got {other:?}"),
        }
        let short = "x1,x2,value,solve_time,status\n0,0,1,0.1\n";
        assert!(matches!(SweepTable::read_csv(short.as_bytes()), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn positive_field_has_empty_contour() {
        let t = table(&[1.0; 12], 3, 4);
        assert!(zero_contour(&t.field().unwrap()).unwrap().is_empty());
        let svg = emit_contour(&t, &t.field().unwrap()).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains(r#"id="verified" d="""#));
        assert!(svg.contains("x₁ (rad)") && svg.contains("x₂ (rad/s)"));
    }

    #[test]
    fn negative_field_contour_hugs_the_boundary() {
        let t = table(&[-1.0; 12], 3, 4);
        let segs = zero_contour(&t.field().unwrap()).unwrap();
        assert!(!segs.is_empty());
        for s in &segs {
            for p in s {
                let on_x = (p[0].abs() - 1.0).abs() < 1e-9 && p[1].abs() <= 2.0 + 1e-9;
                let on_y = (p[1].abs() - 2.0).abs() < 1e-9 && p[0].abs() <= 1.0 + 1e-9;
                assert!(on_x || on_y, "{p:?} is off the boundary");
            }
        }
        let perimeter: f64 = segs.iter().map(|[a, b]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).sum();
        assert!((perimeter - 12.0).abs() < 1e-9);
    }

    #[test]
    fn contour_crosses_at_linear_interpolant() {
        // value x1 - 0.25 on a 5 x 2 grid: the level line is x1 = 0.25
        let g = GridValueFunction::uniform(&[-1.0, -1.0], &[1.0, 1.0], &[5, 2]).unwrap();
        let vals = (0..g.num_nodes()).map(|i| g.node(i)[0] - 0.25).collect();
        let segs = zero_contour(&g.with_values(vals).unwrap()).unwrap();
        let interior: Vec<_> = segs.iter().filter(|[a, b]| (a[0] - 0.25).abs() < 1e-12 && (b[0] - 0.25).abs() < 1e-12).collect();
        assert_eq!(interior.len(), 1);
    }

    #[test]
    fn coverage_counts_and_dilation() {
        use crate::model::{pendulum_problem, Pendulum};
        let (_, sets) = pendulum_problem(Pendulum::default(), 0.05);
        let (lo, hi) = sets.state.bounding_box().unwrap();
        let oracle = GridValueFunction::uniform(&lo, &hi, &[5, 5]).unwrap();
        // oracle: only the centre node is inside
        let ov = (0..25).map(|i| if i == 12 { -1.0 } else { 1.0 }).collect();
        let oracle = oracle.with_values(ov).unwrap();
        let mut t = SweepTable {
            axes: oracle.axes().to_vec(),
            rows: (0..25)
                .map(|i| SweepRow {
                    x: oracle.node(i),
                    value: 1.0,
                    solve_time: 0.1,
                    status: VerificationStatus::Solved,
                    affine_residual: 1e-13,
                    realization_residual: 2e-13,
                })
                .collect(),
        };
        t.rows[12].value = -0.5;
        t.rows[13].value = -0.1; // neighbour: inside the dilation
        t.rows[0].value = -0.2; // corner: an exception
        let r = coverage(&t, &oracle, &sets).unwrap();
        assert_eq!((r.verified, r.oracle), (3, 1));
        assert_eq!(r.ratio, 3.0);
        assert_eq!(r.exceptions, vec![oracle.node(0)]);
    }
}
