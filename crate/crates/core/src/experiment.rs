//! End-to-end pipeline shared by the command line and the acceptance suite:
//! training, oracle, sweep, closed-loop runs and the bench checks, with
//! artifacts cached in an output directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::bench::{
    closed_loop_experiment, coverage, emit_contour, sweep_axes, sweep_safe_set, timing_report, ClosedLoopConfig,
    ClosedLoopReport, CoverageReport, SweepTable, TimingStats,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::filter::{tune_terminal_lqr, FaultInjector, SafetyFilter, TerminalController, TubeVerifier};
use crate::grid::{GridGame, GridValueFunction};
use crate::learn::train::{read_log_csv, smooth, write_log_csv};
use crate::learn::{read_checkpoint, train, write_checkpoint, EpochLog, Nets};
use crate::model::{ConstraintSets, DisturbedModel};
use crate::policy::{clip_to_box, ConstantPolicy};
use crate::sls::{tube_soundness_check, SlsVerifier, SolverTolerances};

/// File layout of an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
}

const SNAPSHOT: &str = "config.toml";

impl Artifacts {
    /// Opens `dir`, creating it. Cached artifacts written under a different
    /// configuration are removed.
    pub fn open(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut keyed = cfg.clone();
        keyed.out_dir = PathBuf::new();
        let text = keyed.to_toml_string()?;
        let snap = dir.join(SNAPSHOT);
        if fs::read_to_string(&snap).ok().as_deref() != Some(text.as_str()) {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                let ours = ["checkpoint_", "train_log_", "oracle", "sweep_", "filter_", "contour_"]
                    .iter()
                    .any(|p| name.starts_with(p));
                if ours && path.is_file() {
                    fs::remove_file(&path)?;
                }
            }
            fs::write(&snap, text)?;
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_seed{seed}.bin"))
    }

    pub fn train_log(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("train_log_seed{seed}.csv"))
    }

    pub fn oracle(&self) -> PathBuf {
        self.dir.join("oracle.bin")
    }

    pub fn oracle_csv(&self) -> PathBuf {
        self.dir.join("oracle.csv")
    }

    pub fn sweep(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("sweep_seed{seed}.csv"))
    }

    pub fn filter_log(&self, name: &str) -> PathBuf {
        self.dir.join(format!("filter_{name}.csv"))
    }

    pub fn contour(&self, seed: u64) -> PathBuf {
        self.dir.join(format!("contour_seed{seed}.svg"))
    }
}

/// Configured problem with its curvature bound.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub model: DisturbedModel,
    pub sets: ConstraintSets,
    pub mu: Vec<f64>,
}

/// Largest drop of the smoothed probe fraction below its running maximum.
pub fn probe_drawdown(log: &[EpochLog], window: usize) -> f64 {
    let raw: Vec<f64> = log.iter().map(|e| e.probe_fraction).collect();
    let mut peak = f64::NEG_INFINITY;
    smooth(&raw, window).into_iter().fold(0.0, |dd, v| {
        peak = peak.max(v);
        dd.max(peak - v)
    })
}

/// Smoothed probe fraction never falls more than `slack` below its running
/// maximum and the last raw value is at least `target`.
pub fn probe_trend_ok(log: &[EpochLog], window: usize, slack: f64, target: f64) -> bool {
    !log.is_empty() && probe_drawdown(log, window) <= slack && log.last().unwrap().probe_fraction >= target
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, sets) = cfg.problem()?;
        let mu = cfg.curvature(&model, &sets)?;
        Ok(Self { cfg, model, sets, mu })
    }

    pub fn verifier(&self) -> Result<SlsVerifier> {
        SlsVerifier::new(
            self.model.clone(),
            self.sets.clone(),
            self.mu.clone(),
            self.cfg.sweep.horizon,
            SolverTolerances::default(),
        )
    }

    /// Trains with `seed` and writes the checkpoint and the epoch log.
    pub fn train(&self, art: &Artifacts, seed: u64, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(Nets, Vec<EpochLog>)> {
        let mut tc = self.cfg.train.clone();
        tc.seed = seed;
        let out = train(&self.model, &self.sets, &tc, |e, _| on_epoch(e))?;
        write_checkpoint(&out.nets, BufWriter::new(File::create(art.checkpoint(seed))?))?;
        write_log_csv(&out.log, File::create(art.train_log(seed))?)?;
        Ok((out.nets, out.log))
    }

    pub fn load_or_train(&self, art: &Artifacts, seed: u64) -> Result<(Nets, Vec<EpochLog>)> {
        let (ck, lg) = (art.checkpoint(seed), art.train_log(seed));
        if ck.is_file() && lg.is_file() {
            let nets = read_checkpoint(BufReader::new(File::open(ck)?))?;
            let log = read_log_csv(File::open(lg)?)?;
            return Ok((nets, log));
        }
        self.train(art, seed, |_| {})
    }

    pub fn load_nets(&self, art: &Artifacts, seed: u64) -> Result<Nets> {
        let path = art.checkpoint(seed);
        let f = File::open(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e} (run `train` first)", path.display())))
        })?;
        read_checkpoint(BufReader::new(f))
    }

    /// Value iteration on the oracle grid.
    pub fn solve_oracle(&self) -> Result<GridValueFunction> {
        let (lo, hi) = self.sets.state.bounding_box()?;
        let axes = GridValueFunction::uniform(&lo, &hi, &self.cfg.oracle.shape)?.axes().to_vec();
        let game = GridGame::new(&self.model, &self.sets, axes, self.cfg.ra_config(&self.sets)?)?;
        Ok(game.value_iteration()?.value)
    }

    pub fn load_or_solve_oracle(&self, art: &Artifacts) -> Result<GridValueFunction> {
        if art.oracle().is_file() {
            return GridValueFunction::read_binary(BufReader::new(File::open(art.oracle())?));
        }
        let v = self.solve_oracle()?;
        v.write_binary(BufWriter::new(File::create(art.oracle())?))?;
        v.write_csv(File::create(art.oracle_csv())?)?;
        Ok(v)
    }

    pub fn sweep(&self, art: &Artifacts, seed: u64, nets: &Nets) -> Result<SweepTable> {
        let axes = sweep_axes(&self.sets, &self.cfg.sweep.shape)?;
        let table = sweep_safe_set(&self.verifier()?, &nets.actor, axes)?;
        table.write_csv(File::create(art.sweep(seed))?)?;
        Ok(table)
    }

    pub fn load_or_sweep(&self, art: &Artifacts, seed: u64, nets: &Nets) -> Result<SweepTable> {
        if art.sweep(seed).is_file() {
            return SweepTable::read_csv(File::open(art.sweep(seed))?);
        }
        self.sweep(art, seed, nets)
    }

    pub fn terminal(&self) -> Result<TerminalController> {
        let f = &self.cfg.filter;
        Ok(tune_terminal_lqr(&self.model, &self.sets, &f.lqr_q, &f.lqr_r, &f.gate, f.max_doublings)?.0)
    }

    /// Closed loop under the configured constant nominal input. `blocked`
    /// lists verifier calls forced to fail.
    pub fn run_filter(
        &self,
        nets: &Nets,
        terminal: &TerminalController,
        blocked: Vec<std::ops::Range<usize>>,
        steps: usize,
        seed: u64,
    ) -> Result<ClosedLoopReport> {
        let f = &self.cfg.filter;
        let verifier = FaultInjector::new(self.verifier()?, blocked);
        let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &nets.actor, terminal, &self.sets)?;
        closed_loop_experiment(
            &filter,
            &self.model,
            &self.sets,
            &ConstantPolicy(f.nominal_input.clone()),
            &ClosedLoopConfig {
                x0: f.x0.clone(),
                steps,
                vertex_bias: f.vertex_bias,
                seed,
            },
        )
    }

    /// Re-verifies up to `max_points` verified sweep points (evenly spread
    /// over the verified list) and rolls out the tube controller from each.
    pub fn soundness(&self, table: &SweepTable, nets: &Nets, max_points: usize, rollouts: usize) -> Result<SoundnessSummary> {
        let verifier = self.verifier()?;
        let (lo, hi) = self.sets.input.bounding_box()?;
        let verified: Vec<&Vec<f64>> = table.rows.iter().filter(|r| r.verified()).map(|r| &r.x).collect();
        let picks: Vec<&Vec<f64>> = if verified.len() <= max_points {
            verified
        } else {
            (0..max_points).map(|i| verified[i * verified.len() / max_points]).collect()
        };
        let mut summary = SoundnessSummary::default();
        for (i, x) in picks.into_iter().enumerate() {
            let u = clip_to_box(&crate::policy::Policy::act(&nets.actor, x), &lo, &hi);
            let res = verifier.verify(x, &u, &nets.actor)?;
            if !res.verified() {
                summary.reverify_mismatches += 1;
                continue;
            }
            let rep = tube_soundness_check(&verifier, &res, rollouts, i as u64, 1e-6)?;
            summary.points += 1;
            summary.rollouts += rep.rollouts;
            summary.violations += rep.violations;
            summary.max_affine_residual = summary.max_affine_residual.max(res.affine_residual);
            summary.max_realization_residual = summary.max_realization_residual.max(res.realization_residual);
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SoundnessSummary {
    pub points: usize,
    pub rollouts: usize,
    pub violations: usize,
    /// Verified in the sweep but not on re-solving.
    pub reverify_mismatches: usize,
    pub max_affine_residual: f64,
    pub max_realization_residual: f64,
}

/// Outcome of the sweep-level checks for one trained seed.
#[derive(Debug, Clone)]
pub struct SweepChecks {
    pub seed: u64,
    pub timing: TimingStats,
    pub coverage: CoverageReport,
}

impl SweepChecks {
    pub fn coverage_ok(&self, min: f64) -> bool {
        self.coverage.ratio >= min && self.coverage.exceptions.is_empty()
    }

    pub fn timing_ok(&self, budget: f64) -> bool {
        self.timing.mean < budget
    }
}

impl Experiment {
    pub fn sweep_checks(&self, seed: u64, table: &SweepTable, oracle: &GridValueFunction) -> Result<SweepChecks> {
        Ok(SweepChecks {
            seed,
            timing: timing_report(table),
            coverage: coverage(table, oracle, &self.sets)?,
        })
    }

    /// Trains and sweeps the configured seeds in order until one meets the
    /// coverage requirement; returns every attempt, the passing one last.
    pub fn select_seed(
        &self,
        art: &Artifacts,
        oracle: &GridValueFunction,
        mut progress: impl FnMut(&str),
    ) -> Result<Vec<(Nets, SweepTable, SweepChecks)>> {
        let mut attempts = Vec::new();
        for &seed in &self.cfg.sweep.seeds {
            progress(&format!("seed {seed}: training"));
            let (nets, _) = self.load_or_train(art, seed)?;
            progress(&format!("seed {seed}: sweeping"));
            let table = self.load_or_sweep(art, seed, &nets)?;
            let checks = self.sweep_checks(seed, &table, oracle)?;
            let done = checks.coverage_ok(self.cfg.sweep.min_coverage);
            fs::write(art.contour(seed), emit_contour(&table, oracle)?)?;
            attempts.push((nets, table, checks));
            if done {
                break;
            }
        }
        Ok(attempts)
    }
}
