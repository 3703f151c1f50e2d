//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values. Run with `--nocapture` to see them:
//!
//! ```text
//! cargo test -p serveplan --test acceptance -- --nocapture
//! ```

mod common;

use std::time::Instant;

use common::{enumerate_optimum, random_profile};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serveplan::allocator::Topology;
use serveplan::estimator::BatchEstimator;
use serveplan::interference::{
    gap_report, DownclockModel, InterferenceModel, MemoryLatencyCurve,
};
use serveplan::optimizer::{solve, InstanceGroup, OptimizeError, SolveOptions};
use serveplan::profile::{grid_size, SyntheticProfile};
use serveplan::sim::{run_trace, Phase, SimOptions, TraceSpec};
use serveplan::{Configuration, Profile};

/// Criterion 1: the solver equals exhaustive enumeration over all feasible
/// item multisets on 200 random profiles with T <= 8, B <= 16, exactly,
/// with the whole sweep under 60 s.
#[test]
fn criterion_1_solver_matches_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE01);
    let mut feasible = 0usize;
    let mut infeasible = 0usize;
    for case in 0..200u64 {
        let profile = random_profile(case, 8, 4);
        let threads: u32 = rng.random_range(1..=8);
        let batch: u32 = rng.random_range(1..=16);
        let reference = enumerate_optimum(&profile, threads, batch, false);
        match solve(&profile, threads, batch, SolveOptions::default()) {
            Ok(config) => {
                let expected = reference.expect("oracle must agree on feasibility");
                assert_eq!(config.expected_latency, expected, "case {case}");
                assert_eq!(config.batch_sum(), batch);
                assert!(config.thread_sum() <= threads);
                feasible += 1;
            }
            Err(OptimizeError::Infeasible { .. }) => {
                assert!(reference.is_none(), "case {case} oracle disagrees");
                infeasible += 1;
            }
            Err(other) => panic!("case {case}: {other}"),
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "suite took {elapsed:?}, budget is 60 s"
    );
    println!(
        "acceptance criterion 1 (solver vs brute force): PASS — 200 profiles \
         ({feasible} feasible, {infeasible} infeasible) exact in {elapsed:?}"
    );
}

/// Criterion 2: power-of-two profiling shrinks a 16-thread, 2^10-batch
/// sweep from 16,384 cells to 176.
#[test]
fn criterion_2_grid_size_arithmetic() {
    assert_eq!(grid_size(16, 10), 176);
    assert_eq!(2u64.pow(10) * 16, 16_384);
    let table: Profile = SyntheticProfile {
        max_threads: 16,
        batch_exponent: 10,
        ..SyntheticProfile::default()
    }
    .synthesize()
    .unwrap();
    assert_eq!(table.len() as u64, grid_size(16, 10));
    println!(
        "acceptance criterion 2 (grid-size arithmetic): PASS — (10+1)*16 = 176 vs 2^10*16 = 16384"
    );
}

/// Criterion 3: uniformly scaling every profiled latency by c leaves the
/// chosen groups identical and scales the objective by exactly c.
#[test]
fn criterion_3_argmin_invariance_under_uniform_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE03);
    let mut checked = 0usize;
    let mut case = 0u64;
    while checked < 50 {
        case += 1;
        let profile = random_profile(1_000 + case, 8, 4);
        let threads: u32 = rng.random_range(1..=8);
        let batch: u32 = rng.random_range(1..=16);
        let Ok(base) = solve(&profile, threads, batch, SolveOptions::default()) else {
            continue;
        };
        for factor in [0.5f64, 1.15, 2.0] {
            let scaled = profile.scaled(factor).unwrap();
            let solved = solve(&scaled, threads, batch, SolveOptions::default()).unwrap();
            assert_eq!(
                solved.groups, base.groups,
                "groups changed under x{factor} (case {case})"
            );
            let want = base.expected_latency * factor;
            let rel = ((solved.expected_latency - want) / want).abs();
            assert!(rel <= 1e-12, "objective off by {rel} under x{factor}");
        }
        checked += 1;
    }
    println!(
        "acceptance criterion 3 (argmin invariance): PASS — {checked} profiles x factors \
         {{0.5, 1.15, 2.0}}, groups identical, objectives exact to 1e-12"
    );
}

/// Criterion 4: on the 16-thin-instance scenario with 1224 ms isolated
/// latency, the downclock model lands near 1397 ms and the combined model
/// near 1600 ms, both within 5%.
#[test]
fn criterion_4_interference_gap_anchors() {
    let profile = Profile::from_entries(
        "resnet50-shaped",
        [(serveplan::profile::ProfileKey::new(1, 16), 1224.0)],
    )
    .unwrap();
    let config = Configuration {
        model_id: "resnet50-shaped".into(),
        total_threads: 16,
        total_batch: 256,
        expected_latency: 1224.0,
        groups: vec![InstanceGroup::new(16, 1, 16)],
    };

    let down = gap_report(
        &profile,
        &config,
        &InterferenceModel::Downclock(DownclockModel::default()),
        3.0,
    )
    .unwrap();
    let down_err = (down.adjusted_ms - 1397.0).abs() / 1397.0;
    assert!(down_err < 0.05, "downclock-only {} off by {down_err}", down.adjusted_ms);

    let both = gap_report(
        &profile,
        &config,
        &InterferenceModel::Both(DownclockModel::default(), MemoryLatencyCurve::default()),
        3.0,
    )
    .unwrap();
    let both_err = (both.adjusted_ms - 1600.0).abs() / 1600.0;
    assert!(both_err < 0.05, "combined {} off by {both_err}", both.adjusted_ms);
    assert!(both.adjusted_ms > down.adjusted_ms);
    assert_eq!(down.expected_ms, 1224.0);

    println!(
        "acceptance criterion 4 (interference anchors): PASS — downclock {:.1} ms \
         (target 1397, {:.1}%), combined {:.1} ms (target 1600, {:.1}%)",
        down.adjusted_ms,
        down_err * 100.0,
        both.adjusted_ms,
        both_err * 100.0
    );
}

/// Criterion 5: the estimator converges 8 -> 64 exactly once within n
/// samples of a step, and an adversarial alternating trace triggers at most
/// once per reconfiguration-timeout window.
#[test]
fn criterion_5_estimator_convergence_and_suppression() {
    // Convergence: defaults alpha = 0.25, n = 8. Depths step from 8 into
    // the band whose floored power of two is 64.
    let mut estimator = BatchEstimator::new(0.25, 8, 8, 5_000_000, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE05);
    let mut modes = Vec::new();
    for step in 0..60 {
        let depth = if step < 20 {
            8
        } else {
            rng.random_range(96..=112)
        };
        estimator.observe(depth);
        modes.push(estimator.smoothed_batch().unwrap());
    }
    let mut transitions = Vec::new();
    for pair in modes.windows(2) {
        if pair[0] != pair[1] {
            transitions.push((pair[0], pair[1]));
        }
    }
    assert_eq!(transitions, vec![(8, 64)], "modes: {modes:?}");
    let flip_at = modes.iter().position(|&m| m == 64).unwrap();
    assert!(
        (20..=20 + 8).contains(&flip_at),
        "transition at sample {flip_at}, step at 20, window 8"
    );

    // Suppression: estimates alternate between 8 and 16 with neither
    // holding the window for long; triggers stay bounded by the decision
    // cadence. Samples every 100 ms over 60 s, window 5 s.
    let mut estimator = BatchEstimator::new(1.0, 8, 8, 5_000_000, 0).unwrap();
    let mut triggers = 0usize;
    let total_samples = 600u64;
    for sample in 0..total_samples {
        let depth = if sample % 10 < 5 { 8 } else { 16 };
        estimator.observe(depth);
        let now = sample * 100_000;
        if let Some(batch) = estimator.should_reconfigure(now) {
            estimator.set_current_batch(batch);
            triggers += 1;
        }
    }
    let bound = (total_samples * 100_000 / 5_000_000) as usize;
    assert!(triggers <= bound, "{triggers} triggers exceed bound {bound}");

    println!(
        "acceptance criterion 5 (estimator): PASS — single 8->64 transition at sample \
         {flip_at} (step at 20, n = 8); adversarial trace: {triggers} triggers <= {bound}"
    );
}

/// Criterion 6: the rate-step trace reconfigures exactly once through the
/// full phase cycle with no dropped requests, bounded dispatch gaps, and a
/// post-reconfiguration steady state strictly faster than the spike period.
#[test]
fn criterion_6_no_downtime_reconfiguration() {
    let profile: Profile = SyntheticProfile {
        model_id: "step-model".into(),
        batch_growth: 0.25,
        max_threads: 16,
        batch_exponent: 10,
        ..SyntheticProfile::default()
    }
    .synthesize()
    .unwrap();
    let topo = Topology::uniform(1, 16).unwrap();
    let trace = TraceSpec {
        rate_per_s: 100.0,
        duration_s: 25.0,
        step_at_s: Some(8.0),
        step_rate_per_s: Some(800.0),
        jitter: 0.0,
        seed: 7,
    }
    .generate()
    .unwrap();
    let options = SimOptions {
        batch_timeout_ms: 1_000.0,
        ..SimOptions::default()
    };
    let report = run_trace(&trace, &profile, &topo, &options).unwrap();

    // Exactly one reconfiguration, walking the full cycle.
    assert_eq!(report.summary.reconfigurations, 1);
    let phases: Vec<Phase> = report.summary.phase_log.iter().map(|p| p.phase).collect();
    assert_eq!(
        phases,
        vec![
            Phase::BatchEstimation,
            Phase::PassiveScaleUp,
            Phase::DualActive,
            Phase::PassiveScaleDown,
            Phase::BatchEstimation,
        ]
    );

    // Nothing dropped.
    assert_eq!(report.summary.dropped_requests, 0);
    assert_eq!(report.summary.completed_requests, report.summary.total_requests);

    // Dispatch gaps through the reconfiguration window stay under
    // batch timeout + the longest observed service time.
    let trigger_us = (report.summary.config_history[1].at_ms * 1_000.0) as u64;
    let settled_us = (report.summary.phase_log.last().unwrap().at_ms * 1_000.0) as u64;
    let max_service_us = report
        .batches
        .iter()
        .map(|b| b.completed_at - b.dispatched_at)
        .max()
        .unwrap();
    let bound_us = 1_000_000 + max_service_us;
    let mut max_gap_us = 0u64;
    for pair in report.dispatch_times.windows(2) {
        if pair[1] >= trigger_us && pair[0] <= settled_us {
            max_gap_us = max_gap_us.max(pair[1] - pair[0]);
        }
    }
    assert!(
        max_gap_us <= bound_us,
        "dispatch gap {max_gap_us}us exceeds bound {bound_us}us"
    );

    // The spike period served by the old configuration is strictly slower
    // than the post-reconfiguration steady state.
    let step_us = 8_000_000u64;
    let dual_us = (report
        .summary
        .phase_log
        .iter()
        .find(|p| p.phase == Phase::DualActive)
        .unwrap()
        .at_ms
        * 1_000.0) as u64;
    let mean = |latencies: Vec<f64>| -> f64 {
        assert!(!latencies.is_empty());
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    let spike_mean = mean(
        report
            .batches
            .iter()
            .filter(|b| b.dispatched_at >= step_us && b.dispatched_at < dual_us)
            .map(|b| b.latency_ms())
            .collect(),
    );
    let post_mean = mean(
        report
            .batches
            .iter()
            .filter(|b| b.dispatched_at >= settled_us + 1_000_000)
            .map(|b| b.latency_ms())
            .collect(),
    );
    assert!(
        post_mean < spike_mean,
        "post-steady {post_mean:.1} ms must beat spike period {spike_mean:.1} ms"
    );

    println!(
        "acceptance criterion 6 (no-downtime reconfiguration): PASS — 1 reconfiguration, \
         full phase cycle, 0 dropped, max gap {:.1} ms <= {:.1} ms, spike {spike_mean:.1} ms \
         -> steady {post_mean:.1} ms",
        max_gap_us as f64 / 1_000.0,
        bound_us as f64 / 1_000.0
    );
}

/// Criterion 7: a non-power-of-two thread budget makes the strict solver
/// mix instance shapes; brute force confirms optimality.
#[test]
fn criterion_7_mixed_shape_configuration() {
    let profile: Profile = SyntheticProfile {
        model_id: "mixed".into(),
        max_threads: 14,
        batch_exponent: 4,
        ..SyntheticProfile::default()
    }
    .synthesize()
    .unwrap();
    let config = solve(&profile, 14, 16, SolveOptions::strict()).unwrap();
    assert!(
        config.groups.len() >= 2,
        "expected a mixed configuration, got {:?}",
        config.groups
    );
    assert_eq!(config.thread_sum(), 14);
    assert_eq!(config.batch_sum(), 16);
    let reference = enumerate_optimum(&profile, 14, 16, true).unwrap();
    assert_eq!(config.expected_latency, reference);

    println!(
        "acceptance criterion 7 (mixed shapes at T=14): PASS — {} at {:.3} ms, \
         brute force agrees",
        config.compact(),
        config.expected_latency
    );
}

/// Criterion 8: identical seeds give byte-identical timelines.
#[test]
fn criterion_8_simulation_determinism() {
    let profile: Profile = SyntheticProfile {
        max_threads: 16,
        batch_exponent: 7,
        ..SyntheticProfile::default()
    }
    .synthesize()
    .unwrap();
    let topo = Topology::uniform(2, 8).unwrap();
    let spec = TraceSpec {
        rate_per_s: 120.0,
        duration_s: 10.0,
        step_at_s: Some(4.0),
        step_rate_per_s: Some(400.0),
        jitter: 0.3,
        seed: 99,
    };
    let run = || {
        let trace = spec.generate().unwrap();
        run_trace(&trace, &profile, &topo, &SimOptions::default()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.timeline_csv().into_bytes(), b.timeline_csv().into_bytes());
    assert_eq!(a.summary_json(), b.summary_json());

    println!(
        "acceptance criterion 8 (determinism): PASS — two seeded runs, {} timeline bytes identical",
        a.timeline_csv().len()
    );
}

/// Criterion 9: a full canonical grid solve at T = 64, B = 1024 finishes
/// inside a second.
#[test]
fn criterion_9_solver_scale() {
    let profile: Profile = SyntheticProfile {
        model_id: "big".into(),
        max_threads: 64,
        batch_exponent: 10,
        jitter: 0.1,
        seed: 4,
        ..SyntheticProfile::default()
    }
    .synthesize()
    .unwrap();
    assert_eq!(profile.len() as u64, grid_size(64, 10));
    let started = Instant::now();
    let config = solve(&profile, 64, 1024, SolveOptions::default()).unwrap();
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_millis() < 1_000,
        "solve took {elapsed:?}, budget 1 s"
    );
    assert_eq!(config.batch_sum(), 1024);

    println!(
        "acceptance criterion 9 (scale): PASS — T=64 B=1024 over {} items in {elapsed:?}",
        profile.len()
    );
}
