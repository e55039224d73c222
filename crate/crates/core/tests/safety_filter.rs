use safefilter::config::ExperimentConfig;
use safefilter::experiment::Experiment;
use safefilter::filter::{Branch, FaultInjector, FilterState, Mode, SafetyFilter, TerminalController, TubeVerifier};
use safefilter::Error;

fn setup(blocked: Vec<std::ops::Range<usize>>) -> (Experiment, FaultInjector, TerminalController) {
    let exp = Experiment::new(ExperimentConfig::default()).unwrap();
    let verifier = FaultInjector::new(exp.verifier().unwrap(), blocked);
    let terminal = exp.terminal().unwrap();
    (exp, verifier, terminal)
}

#[test]
fn verified_input_passes_through_bit_exact() {
    let (exp, verifier, lqr) = setup(Vec::new());
    let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &lqr, &lqr, &exp.sets).unwrap();
    let u_nom = [0.1 + 0.2];
    let (u, state, tel) = filter.step(FilterState::new(), &[0.0, 0.0], &u_nom).unwrap();
    assert_eq!(tel.branch, Branch::Verified);
    assert_eq!(u[0].to_bits(), u_nom[0].to_bits());
    assert_eq!(state.mode(), Mode::Fresh);
    assert!(state.has_plan() && tel.value <= 0.0 && !tel.clipped);
}

#[test]
fn out_of_range_nominal_is_clipped_before_verification() {
    let (exp, verifier, lqr) = setup(Vec::new());
    let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &lqr, &lqr, &exp.sets).unwrap();
    let (u, _, tel) = filter.step(FilterState::new(), &[0.0, 0.0], &[40.0]).unwrap();
    assert_eq!(u, vec![5.0]);
    assert_eq!(tel.branch, Branch::Verified);
}

#[test]
fn failed_first_verification_is_an_error() {
    let (exp, verifier, lqr) = setup(vec![0..1]);
    let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &lqr, &lqr, &exp.sets).unwrap();
    match filter.step(FilterState::new(), &[0.0, 0.0], &[0.0]) {
        Err(Error::InitialInfeasible { status, .. }) => assert_eq!(status, "solver-error"),
        other => panic!("expected an initial-feasibility error, got {other:?}"),
    }
}

#[test]
fn nonfinite_state_is_rejected() {
    let (exp, verifier, lqr) = setup(Vec::new());
    let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &lqr, &lqr, &exp.sets).unwrap();
    assert!(filter.step(FilterState::new(), &[f64::NAN, 0.0], &[0.0]).is_err());
    assert_eq!(verifier.calls(), 0);
}

/// On the nominal trajectory the tube feedback vanishes, so tracking replays
/// the stored inputs exactly; after the horizon the terminal law takes over.
#[test]
fn tracking_replays_plan_then_hands_over_to_terminal() {
    let (exp, verifier, lqr) = setup(vec![1..usize::MAX]);
    let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &lqr, &lqr, &exp.sets).unwrap();
    let horizon = filter.horizon();
    let mut x = vec![0.1, -0.2];
    let (u, mut state, _) = filter.step(FilterState::new(), &x, &[1.0]).unwrap();
    let plan = state.stored_plan().unwrap().trajectory.clone();
    x = exp.model.step_nominal(&x, &u).unwrap().iter().copied().collect();
    for k in 1..horizon + 3 {
        let (u, next, tel) = filter.step(state, &x, &[-5.0]).unwrap();
        state = next;
        if k < horizon {
            assert_eq!(state.mode(), Mode::Tracking(k));
            assert_eq!((tel.branch, tel.plan_age), (Branch::Tracking, k));
            for (a, b) in u.iter().zip(plan.input(k)) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "step {k}: {a} vs {b}");
            }
        } else {
            assert_eq!(state.mode(), Mode::Terminal);
            assert_eq!(tel.branch, Branch::Terminal);
            assert_eq!(u, safefilter::policy::Policy::act(&lqr, &x));
        }
        assert!(exp.sets.state.contains(&x, 1e-9));
        x = exp.model.step_nominal(&x, &u).unwrap().iter().copied().collect();
    }
    assert_eq!(verifier.calls(), horizon + 3);
}

#[test]
fn recovery_after_failure_returns_to_fresh() {
    let (exp, verifier, lqr) = setup(vec![1..3]);
    let filter = SafetyFilter::new(&verifier as &dyn TubeVerifier, &lqr, &lqr, &exp.sets).unwrap();
    let mut state = FilterState::new();
    let mut x = vec![0.0, 0.0];
    let mut branches = Vec::new();
    for _ in 0..4 {
        let (u, next, tel) = filter.step(state, &x, &[0.0]).unwrap();
        state = next;
        branches.push((tel.branch, tel.plan_age));
        x = exp.model.step_nominal(&x, &u).unwrap().iter().copied().collect();
    }
    assert_eq!(
        branches,
        vec![(Branch::Verified, 0), (Branch::Tracking, 1), (Branch::Tracking, 2), (Branch::Verified, 0)]
    );
    assert_eq!(state.steps(), 4);
}
