use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use safefilter::bench::{emit_contour, timing_report, ClosedLoopReport, SweepTable};
use safefilter::config::ExperimentConfig;
use safefilter::experiment::{Artifacts, Experiment};
use safefilter::filter::write_telemetry_csv;
use safefilter::grid::{zero_sublevel_fraction, GridValueFunction};

#[derive(Parser)]
#[command(name = "safefilter", version, about = "Learned reach-avoid policies with a verified safety filter")]
struct Cli {
    /// TOML experiment configuration; defaults reproduce the pendulum run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (overrides the first configured seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps and grid solves (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train actor, adversary and critic; writes a checkpoint and epoch log.
    Train,
    /// Solve the grid-DP oracle by value iteration.
    GridSolve,
    /// Verify the trained policy at every sweep grid point.
    Sweep,
    /// Closed-loop run of the safety filter.
    RunFilter {
        #[arg(long)]
        steps: Option<usize>,
        /// Force verifier calls `START..END` (0-based) to fail.
        #[arg(long, value_parser = parse_range)]
        block: Vec<std::ops::Range<usize>>,
        /// Telemetry file name suffix.
        #[arg(long, default_value = "run")]
        name: String,
    },
    /// Run every check (training seeds, sweep, oracle comparison, timing,
    /// soundness, closed loop); exits nonzero if any fails.
    Bench,
    /// Contour plot of the verified set against the oracle.
    Plot,
}

fn parse_range(s: &str) -> std::result::Result<std::ops::Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or("expected START..END")?;
    let a: usize = a.parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.parse().map_err(|e| format!("{e}"))?;
    if b < a {
        return Err("END must not be below START".into());
    }
    Ok(a..b)
}

fn print_loop(name: &str, r: &ClosedLoopReport) {
    println!(
        "{name}: steps {} violations {} max h {:.4} verified {} tracking {} terminal {} clipped {} outside U {}",
        r.telemetry.len(),
        r.violations,
        r.max_h,
        r.verified_steps,
        r.tracking_steps,
        r.terminal_steps,
        r.clipped_steps,
        r.inputs_outside_u
    );
    println!(
        "{name}: solve time mean {:.4} s, sd {:.4} s, max {:.4} s over {} solves",
        r.timing.mean, r.timing.std, r.timing.max, r.timing.count
    );
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.sweep.seeds = vec![s];
    }
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    let seed = cfg.sweep.seeds[0];
    let art = Artifacts::open(&cfg.out_dir, &cfg)?;
    let exp = Experiment::new(cfg)?;
    let t0 = Instant::now();

    match cli.command {
        Command::Train => {
            let (_, log) = exp.train(&art, seed, |e| {
                println!(
                    "epoch {:3} steps {:7} episodes {:6} critic {:.3e} actor {:+.4} adversary {:+.4} probe {:.3}",
                    e.epoch, e.steps, e.episodes, e.critic_loss, e.actor_loss, e.adversary_loss, e.probe_fraction
                );
            })?;
            println!(
                "final probe fraction {:.3}; wrote {} in {:.1} s",
                log.last().map_or(f64::NAN, |e| e.probe_fraction),
                art.checkpoint(seed).display(),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::GridSolve => {
            let v = exp.solve_oracle()?;
            v.write_binary(File::create(art.oracle())?)?;
            v.write_csv(File::create(art.oracle_csv())?)?;
            println!(
                "oracle {:?}: zero-sublevel fraction {:.3}; wrote {} in {:.1} s",
                v.shape(),
                zero_sublevel_fraction(&v),
                art.oracle().display(),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Sweep => {
            let nets = exp.load_nets(&art, seed)?;
            let table = exp.sweep(&art, seed, &nets)?;
            let t = timing_report(&table);
            println!(
                "verified {}/{} points; solve time mean {:.4} s, sd {:.4} s, max {:.4} s; wrote {} in {:.1} s",
                table.verified_count(),
                table.rows.len(),
                t.mean,
                t.std,
                t.max,
                art.sweep(seed).display(),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::RunFilter { steps, block, name } => {
            let nets = exp.load_nets(&art, seed)?;
            let terminal = exp.terminal()?;
            let block = if block.is_empty() { exp.cfg.blocked_calls() } else { block };
            let steps = steps.unwrap_or(exp.cfg.filter.steps);
            let r = exp.run_filter(&nets, &terminal, block, steps, exp.cfg.filter.seed)?;
            write_telemetry_csv(&r.telemetry, File::create(art.filter_log(&name))?)?;
            print_loop(&name, &r);
            return Ok(r.violations == 0 && r.inputs_outside_u == 0);
        }
        Command::Plot => {
            let table = SweepTable::read_csv(File::open(art.sweep(seed)).context("run `sweep` first")?)?;
            let oracle = GridValueFunction::read_binary(File::open(art.oracle()).context("run `grid-solve` first")?)?;
            fs::write(art.contour(seed), emit_contour(&table, &oracle)?)?;
            println!("wrote {}", art.contour(seed).display());
        }
        Command::Bench => return bench(&exp, &art),
    }
    Ok(true)
}

fn bench(exp: &Experiment, art: &Artifacts) -> Result<bool> {
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    let oracle = exp.load_or_solve_oracle(art)?;
    println!("oracle zero-sublevel fraction {:.3}", zero_sublevel_fraction(&oracle));
    let attempts = exp.select_seed(art, &oracle, |m| println!("{m}"))?;
    let Some((nets, table, checks)) = attempts.last() else {
        bail!("no training seed configured");
    };
    let sw = &exp.cfg.sweep;
    for (_, _, c) in &attempts {
        println!(
            "seed {}: verified {} oracle {} ratio {:.3} exceptions {}",
            c.seed,
            c.coverage.verified,
            c.coverage.oracle,
            c.coverage.ratio,
            c.coverage.exceptions.len()
        );
    }
    check(
        "coverage",
        checks.coverage.ratio >= sw.min_coverage,
        format!("ratio {:.3} (need {:.2})", checks.coverage.ratio, sw.min_coverage),
    );
    check(
        "containment",
        checks.coverage.exceptions.is_empty(),
        format!("{} verified points outside the dilated oracle set", checks.coverage.exceptions.len()),
    );
    check(
        "timing",
        checks.timing_ok(sw.timing_budget),
        format!(
            "mean {:.4} s, sd {:.4} s, max {:.4} s (budget {:.2} s)",
            checks.timing.mean, checks.timing.std, checks.timing.max, sw.timing_budget
        ),
    );
    let snd = exp.soundness(table, nets, sw.soundness_points, sw.soundness_rollouts)?;
    check(
        "soundness",
        snd.violations == 0 && snd.reverify_mismatches == 0,
        format!(
            "{} points x {} rollouts, {} violations, {} re-verification mismatches",
            snd.points, sw.soundness_rollouts, snd.violations, snd.reverify_mismatches
        ),
    );
    check(
        "identities",
        snd.max_affine_residual <= 1e-6 && snd.max_realization_residual <= 1e-6,
        format!(
            "affine {:.2e}, realization {:.2e}",
            snd.max_affine_residual, snd.max_realization_residual
        ),
    );
    let terminal = exp.terminal()?;
    let f = &exp.cfg.filter;
    let normal = exp.run_filter(nets, &terminal, Vec::new(), f.steps, f.seed)?;
    write_telemetry_csv(&normal.telemetry, File::create(art.filter_log("run"))?)?;
    print_loop("run", &normal);
    check(
        "closed loop",
        normal.violations == 0 && normal.inputs_outside_u == 0,
        format!("{} state violations over {} steps", normal.violations, f.steps),
    );
    let horizon = exp.cfg.sweep.horizon;
    let faulted = exp.run_filter(nets, &terminal, vec![1..horizon + 20], 4 * horizon, f.seed + 1)?;
    write_telemetry_csv(&faulted.telemetry, File::create(art.filter_log("fault"))?)?;
    print_loop("fault", &faulted);
    check(
        "fault injection",
        faulted.violations == 0 && faulted.tracking_steps > 0 && faulted.terminal_steps > 0,
        format!(
            "{} violations, {} tracking and {} terminal steps",
            faulted.violations, faulted.tracking_steps, faulted.terminal_steps
        ),
    );
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
