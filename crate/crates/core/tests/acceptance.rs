//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset. Trained checkpoints, the oracle and the sweep are cached in
//! `$SAFEFILTER_ACCEPTANCE_DIR` (default: the cargo target tmpdir); delete
//! it to recompute from scratch.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safefilter::bench::SweepTable;
use safefilter::config::ExperimentConfig;
use safefilter::experiment::{Artifacts, Experiment, SweepChecks};
use safefilter::filter::Branch;
use safefilter::grid::{action_grid, GridGame, GridPolicy, GridValueFunction, RAConfig};
use safefilter::learn::{actor_loss, adversary_loss, critic_loss, Head, Mlp, Nets, Transition};
use safefilter::model::{pendulum_problem, sample_polytope, Pendulum};
use safefilter::sls::VerificationStatus;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pendulum_game(n: usize, actions: usize, tol: f64) -> GridGame {
    let (m, sets) = pendulum_problem(Pendulum::default(), 0.05);
    let (lo, hi) = sets.state.bounding_box().unwrap();
    let axes = GridValueFunction::uniform(&lo, &hi, &[n, n]).unwrap().axes().to_vec();
    let cfg = RAConfig {
        gamma: 0.999,
        actions: action_grid(&sets, actions).unwrap(),
        disturbances: sets.disturbance.vertices().unwrap(),
        fixpoint_tol: tol,
        max_sweeps: 1_000_000,
    };
    GridGame::new(&m, &sets, axes, cfg).unwrap()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let game = pendulum_game(9, 5, 1e-9);
    let gamma = game.config().gamma;
    let n = game.num_nodes();
    let (na, nd) = (game.config().actions.len(), game.config().disturbances.len());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::NEG_INFINITY;
    let mut ratio = 0.0f64;
    for i in 0..100 {
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v = game.template().with_values(vals.clone()).unwrap();
        // Half the pairs are small shifts of each other, where the bound is tight.
        let w = if i % 2 == 0 {
            game.template().with_values((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        } else {
            let c = rng.gen_range(-0.05..0.05);
            game.template().with_values(vals.iter().map(|x| x + c).collect()).unwrap()
        };
        let pi = GridPolicy::new((0..n).map(|_| rng.gen_range(0..na)).collect(), na).unwrap();
        let mu = GridPolicy::new((0..n).map(|_| rng.gen_range(0..nd)).collect(), nd).unwrap();
        let d = v.sup_distance(&w);
        let pairs = [
            (game.apply_t(&v).unwrap(), game.apply_t(&w).unwrap()),
            (game.apply_t_pi(&v, &pi).unwrap(), game.apply_t_pi(&w, &pi).unwrap()),
            (game.apply_t_pi_mu(&v, &pi, &mu).unwrap(), game.apply_t_pi_mu(&w, &pi, &mu).unwrap()),
        ];
        for (a, b) in pairs {
            worst = worst.max(a.sup_distance(&b) - gamma * d);
            ratio = ratio.max(a.sup_distance(&b) / d);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 10.0,
        format!(
            "max ||TV - TW|| - gamma ||V - W|| = {worst:.2e} over 300 checks (<= 1e-12), max ratio {ratio:.6} (gamma {gamma}), {secs:.1} s (< 10 s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let game = pendulum_game(21, 5, 1e-12);
    let pi0 = GridPolicy::constant(game.num_nodes(), 2, 5).unwrap();
    let out = game.policy_iteration(&pi0).unwrap();
    let rise = out
        .history
        .windows(2)
        .flat_map(|w| w[1].values().iter().zip(w[0].values()).map(|(b, a)| b - a).collect::<Vec<_>>())
        .fold(f64::NEG_INFINITY, f64::max);
    let residual = game.residual(&out.value).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        rise <= 1e-7 && residual < 1e-8 && secs < 300.0,
        format!(
            "{} policies, max nodewise increase {rise:.2e} (<= 1e-7), final residual {residual:.2e} (< 1e-8), {secs:.1} s (< 300 s)",
            out.history.len()
        ),
    )
}

/// Exhaustive fixed point of the reach-avoid backup on explicit tables,
/// written with plain loops independently of the grid code.
fn table_fixed_point(l: &[f64], h: &[f64], next: &[usize], na: usize, nd: usize, gamma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = l.iter().zip(h).map(|(a, b)| a.max(*b)).collect();
    loop {
        let mut new = vec![0.0; v.len()];
        for s in 0..v.len() {
            let mut best = f64::INFINITY;
            for a in 0..na {
                let mut worst = f64::NEG_INFINITY;
                for d in 0..nd {
                    worst = worst.max(v[next[(s * na + a) * nd + d]]);
                }
                best = best.min(worst);
            }
            new[s] = (1.0 - gamma) * l[s].max(h[s]) + gamma * h[s].max(l[s].min(best));
        }
        let change = new.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = new;
        if change == 0.0 || change < 1e-15 {
            return v;
        }
    }
}

fn criterion_3() -> Outcome {
    let (n, na, nd, gamma) = (25, 4, 2, 0.95);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut coupled = 0;
    for _ in 0..5 {
        let l: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..0.5)).collect();
        let next: Vec<usize> = (0..n * na * nd).map(|_| rng.gen_range(0..n)).collect();
        let cfg = RAConfig {
            gamma,
            actions: (0..na).map(|a| vec![a as f64]).collect(),
            disturbances: (0..nd).map(|d| vec![d as f64]).collect(),
            fixpoint_tol: 1e-13,
            max_sweeps: 1_000_000,
        };
        let game = GridGame::from_tables(l.clone(), h.clone(), next.clone(), cfg).unwrap();
        let pi = game.policy_iteration(&GridPolicy::constant(n, 0, na).unwrap()).unwrap();
        let vi = game.value_iteration().unwrap();
        let oracle = table_fixed_point(&l, &h, &next, na, nd, gamma);
        coupled += (0..n).filter(|&i| (oracle[i] - l[i].max(h[i])).abs() > 1e-6).count();
        for i in 0..n {
            worst = worst.max((pi.value.values()[i] - oracle[i]).abs());
            worst = worst.max((vi.value.values()[i] - oracle[i]).abs());
            worst = worst.max((pi.value.values()[i] - vi.value.values()[i]).abs());
        }
    }
    outcome(
        worst <= 1e-8,
        format!(
            "5 random 25-state games ({coupled} of 125 values differ from max{{l, h}}): max disagreement among PI, VI and exhaustive oracle {worst:.2e} (<= 1e-8)"
        ),
    )
}

fn small_nets(rng: &mut ChaCha8Rng) -> Nets {
    let (_, sets) = pendulum_problem(Pendulum::default(), 0.05);
    let (xl, xh) = sets.state.bounding_box().unwrap();
    let (ul, uh) = sets.input.bounding_box().unwrap();
    let (dl, dh) = sets.disturbance.bounding_box().unwrap();
    let actor = Mlp::new(&[2, 5, 1], Head::Squash, (&xl, &xh), Some((&ul, &uh)), rng).unwrap();
    let adversary = Mlp::new(&[2, 4, 3], Head::Squash, (&xl, &xh), Some((&dl, &dh)), rng).unwrap();
    let cl: Vec<f64> = xl.iter().chain(&ul).chain(&dl).copied().collect();
    let ch: Vec<f64> = xh.iter().chain(&uh).chain(&dh).copied().collect();
    let mut critic = Mlp::new(&[6, 8, 1], Head::Identity, (&cl, &ch), None, rng).unwrap();
    for p in critic.params_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    let mut target_critic = critic.clone();
    for p in target_critic.params_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    for p in [actor.num_params(), adversary.num_params(), critic.num_params()] {
        assert!(p <= 100);
    }
    Nets {
        actor,
        adversary,
        critic,
        target_critic,
    }
}

fn rel_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let num = analytic.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let den = fd.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    num / den
}

fn fd_gradient(nets: &Nets, which: usize, loss: impl Fn(&Nets) -> f64) -> Vec<f64> {
    let eps = 1e-6;
    let n = match which {
        0 => nets.critic.num_params(),
        1 => nets.actor.num_params(),
        _ => nets.adversary.num_params(),
    };
    (0..n)
        .map(|j| {
            let mut p = nets.clone();
            let mut m = nets.clone();
            let (pp, mp) = match which {
                0 => (p.critic.params_mut(), m.critic.params_mut()),
                1 => (p.actor.params_mut(), m.actor.params_mut()),
                _ => (p.adversary.params_mut(), m.adversary.params_mut()),
            };
            pp[j] += eps;
            mp[j] -= eps;
            (loss(&p) - loss(&m)) / (2.0 * eps)
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let (_, sets) = pendulum_problem(Pendulum::default(), 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let nets = small_nets(&mut rng);
        let batch: Vec<Transition> = (0..16)
            .map(|_| {
                let x = sample_polytope(&sets.state, &mut rng);
                Transition {
                    u: sample_polytope(&sets.input, &mut rng),
                    d: sample_polytope(&sets.disturbance, &mut rng),
                    h: sets.h_margin(&x),
                    l: sets.l_margin(&x),
                    next: sample_polytope(&sets.state, &mut rng),
                    x,
                }
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let gamma = 0.999;
        let (_, gc) = critic_loss(&refs, &nets, gamma);
        let (_, ga) = actor_loss(&refs, &nets);
        let (_, gd) = adversary_loss(&refs, &nets);
        worst[0] = worst[0].max(rel_error(&gc, &fd_gradient(&nets, 0, |n| critic_loss(&refs, n, gamma).0)));
        worst[1] = worst[1].max(rel_error(&ga, &fd_gradient(&nets, 1, |n| actor_loss(&refs, n).0)));
        worst[2] = worst[2].max(rel_error(&gd, &fd_gradient(&nets, 2, |n| adversary_loss(&refs, n).0)));
    }
    outcome(
        worst.iter().all(|w| *w <= 1e-4),
        format!(
            "50 batches, max relative error critic {:.1e}, actor {:.1e}, adversary {:.1e} (<= 1e-4)",
            worst[0], worst[1], worst[2]
        ),
    )
}

/// The trained pendulum pipeline, shared by criteria 5-9.
struct Pipeline {
    exp: Experiment,
    art: Artifacts,
    nets: Nets,
    table: SweepTable,
    checks: SweepChecks,
    attempts: Vec<SweepChecks>,
}

fn pipeline() -> Pipeline {
    let dir = std::env::var_os("SAFEFILTER_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pendulum-default"));
    let cfg = ExperimentConfig {
        out_dir: dir.clone(),
        ..ExperimentConfig::default()
    };
    let art = Artifacts::open(&dir, &cfg).unwrap();
    let exp = Experiment::new(cfg).unwrap();
    let oracle = exp.load_or_solve_oracle(&art).unwrap();
    let mut attempts = exp.select_seed(&art, &oracle, |m| eprintln!("  {m}")).unwrap();
    let (nets, table, checks) = attempts.pop().unwrap();
    let mut earlier: Vec<SweepChecks> = attempts.into_iter().map(|(_, _, c)| c).collect();
    earlier.push(checks.clone());
    Pipeline {
        exp,
        art,
        nets,
        table,
        checks,
        attempts: earlier,
    }
}

fn criterion_5(p: &Pipeline) -> Outcome {
    let t0 = Instant::now();
    let s = p.exp.soundness(&p.table, &p.nets, 50, 1000).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        s.points == 50 && s.violations == 0 && s.reverify_mismatches == 0 && secs < 1800.0,
        format!(
            "{} verified states x 1000 rollouts: {} margin excesses beyond 1e-6, {} re-verification mismatches, {secs:.0} s (< 1800 s)",
            s.points, s.violations, s.reverify_mismatches
        ),
    )
}

fn criterion_6(p: &Pipeline) -> Outcome {
    let terminal = p.exp.terminal().unwrap();
    let f = &p.exp.cfg.filter;
    let horizon = p.exp.cfg.sweep.horizon;
    let normal = p.exp.run_filter(&p.nets, &terminal, Vec::new(), f.steps, f.seed).unwrap();
    let fault = p
        .exp
        .run_filter(&p.nets, &terminal, vec![1..horizon + 20], 4 * horizon, f.seed + 1)
        .unwrap();
    let pass_through = [&normal, &fault].iter().all(|r| {
        r.telemetry
            .iter()
            .zip(&r.inputs)
            .filter(|(t, _)| t.branch == Branch::Verified)
            .all(|(_, u)| u == &f.nominal_input)
    });
    let plan_age_ok = [&normal, &fault].iter().all(|r| {
        r.telemetry
            .iter()
            .filter(|t| t.branch == Branch::Tracking)
            .all(|t| t.plan_age >= 1 && t.plan_age < horizon)
    });
    let tracking_then_terminal = fault.telemetry.iter().position(|t| t.branch == Branch::Tracking)
        < fault.telemetry.iter().position(|t| t.branch == Branch::Terminal)
        && fault.terminal_steps > 0;
    let pass = normal.violations == 0
        && fault.violations == 0
        && normal.inputs_outside_u + fault.inputs_outside_u == 0
        && pass_through
        && plan_age_ok
        && tracking_then_terminal;
    outcome(
        pass,
        format!(
            "{}-step run: {} violations (max h {:.3}), branches {}/{}/{} verified/tracking/terminal; fault run: {} violations, {}/{}/{}; pass-through {pass_through}, plan age {plan_age_ok}",
            f.steps,
            normal.violations,
            normal.max_h,
            normal.verified_steps,
            normal.tracking_steps,
            normal.terminal_steps,
            fault.violations,
            fault.verified_steps,
            fault.tracking_steps,
            fault.terminal_steps
        ),
    )
}

fn criterion_7(p: &Pipeline) -> Outcome {
    let tried: Vec<String> = p
        .attempts
        .iter()
        .map(|c| format!("seed {} ratio {:.3} exceptions {}", c.seed, c.coverage.ratio, c.coverage.exceptions.len()))
        .collect();
    let c = &p.checks.coverage;
    outcome(
        p.checks.coverage_ok(0.6) && p.attempts.len() <= 3,
        format!(
            "verified {} / oracle {} = {:.3} (>= 0.60), {} outside the dilated oracle set (= 0) [{}]",
            c.verified,
            c.oracle,
            c.ratio,
            c.exceptions.len(),
            tried.join("; ")
        ),
    )
}

fn criterion_8(p: &Pipeline) -> Outcome {
    let t = &p.checks.timing;
    outcome(
        p.table.rows.len() == 2400 && t.mean < 1.0,
        format!(
            "{} points, {} solved: mean {:.4} s (< 1.0 s), sd {:.4} s, max {:.4} s",
            p.table.rows.len(),
            t.count,
            t.mean,
            t.std,
            t.max
        ),
    )
}

fn criterion_9(p: &Pipeline) -> Outcome {
    let solved: Vec<_> = p.table.rows.iter().filter(|r| r.status == VerificationStatus::Solved).collect();
    let worst_affine = solved.iter().map(|r| r.affine_residual).fold(0.0f64, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    let worst_real = solved
        .iter()
        .map(|r| r.realization_residual)
        .fold(0.0f64, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    outcome(
        !solved.is_empty() && worst_affine <= 1e-6 && worst_real <= 1e-6,
        format!(
            "{} solved instances: max affine residual {worst_affine:.2e}, max realization residual {worst_real:.2e} (<= 1e-6)",
            solved.len()
        ),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| only.is_empty() || only.contains(&n);
    let mut all_pass = true;
    let mut report = |n: usize, name: &str, run: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        all_pass &= o.pass;
        println!(
            "criterion {n} [{}] {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    };
    if want(1) {
        report(1, "operator contraction", &criterion_1);
    }
    if want(2) {
        report(2, "policy iteration monotone convergence", &criterion_2);
    }
    if want(3) {
        report(3, "finite game oracle equivalence", &criterion_3);
    }
    if want(4) {
        report(4, "loss gradients", &criterion_4);
    }
    if (5..=9).any(want) {
        let t0 = Instant::now();
        let p = std::panic::catch_unwind(pipeline);
        eprintln!("  pipeline ready in {:.1} s", t0.elapsed().as_secs_f64());
        match p {
            Ok(p) => {
                eprintln!("  artifacts in {}", p.art.dir().display());
                if want(7) {
                    report(7, "safe-set scale", &|| criterion_7(&p));
                }
                if want(8) {
                    report(8, "sweep timing", &|| criterion_8(&p));
                }
                if want(9) {
                    report(9, "affine and realization identities", &|| criterion_9(&p));
                }
                if want(5) {
                    report(5, "tube soundness", &|| criterion_5(&p));
                }
                if want(6) {
                    report(6, "persistent safety", &|| criterion_6(&p));
                }
            }
            Err(_) => {
                for n in (5..=9).filter(|n| want(*n)) {
                    report(n, "pendulum pipeline", &|| outcome(false, "pipeline setup failed".into()));
                }
            }
        }
    }
    if !all_pass {
        std::process::exit(1);
    }
}
