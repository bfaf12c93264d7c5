use hrms_core::engine::rng_stream;
use hrms_core::reliability::{
    audit_trace, calibrate_failure_rate, draw_failures, execute_job, execute_job_traced, run_scenario,
    CheckpointPolicy, CostParams, CostRanges, Predictor, Scenario, GUARD_FACTOR,
};
use hrms_core::workload::{preset, Job, JobClass, WorkloadParams};
use proptest::prelude::*;

fn job(t_ideal: f64) -> Job {
    Job::simple(0, 0.0, t_ideal, preset("batch-nwp").unwrap(), JobClass::Batch).unwrap()
}

fn policy() -> impl Strategy<Value = CheckpointPolicy> {
    prop_oneof![
        Just(CheckpointPolicy::RestartOnly),
        Just(CheckpointPolicy::fixed_rate()),
        Just(CheckpointPolicy::prediction_based()),
        Just(CheckpointPolicy::PredictionBased { lead: 0.0 }),
        Just(CheckpointPolicy::error_tolerant()),
    ]
}

/// Small workload so each scenario runs in milliseconds.
fn small_scenario(policy: CheckpointPolicy, epsilon: f64, rate: f64) -> Scenario {
    Scenario {
        workload: WorkloadParams {
            window_factor: 50.0,
            ..WorkloadParams::default()
        },
        policy,
        epsilon,
        failure_rate: rate,
        replicas: 20,
        seed: 5,
        ..Scenario::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn time_is_conserved_and_overhead_non_negative(
        t_ideal in 1.0f64..1000.0,
        c in 0.015f64..0.02,
        r in 0.15f64..0.2,
        mtbf_factor in 0.5f64..20.0,
        eps in 0.0f64..0.2,
        policy in policy(),
        seed in any::<u64>(),
    ) {
        let j = job(t_ideal);
        let costs = CostParams::new(c, r).unwrap();
        let failures = draw_failures(
            &mut rng_stream(seed, "faults", &[]),
            1.0 / (mtbf_factor * t_ideal),
            0.0,
            GUARD_FACTOR * t_ideal,
        );
        let m = execute_job(&j, &policy, &costs, &failures, &Predictor::new(eps), rng_stream(seed, "prediction", &[]))
            .unwrap();
        prop_assert!(m.overhead >= 0.0);
        prop_assert!(m.running_time >= t_ideal * (1.0 - 1e-12));
        let accounted = m.running_time + m.checkpoint_time + m.restore_time;
        prop_assert!((accounted - m.t_exe).abs() <= 1e-9 * m.t_exe, "{} vs {}", accounted, m.t_exe);
        if m.failures == 0 {
            prop_assert!((m.running_time - t_ideal).abs() <= 1e-9 * t_ideal);
        }
        if policy == CheckpointPolicy::RestartOnly && m.failures == 0 {
            prop_assert_eq!(m.overhead, 0.0);
        }
    }

    #[test]
    fn audited_costs_match_drawn_fractions(t_ideal in 1.0f64..1000.0, seed in any::<u64>(), policy in policy()) {
        let costs = CostRanges::default().draw(&mut rng_stream(seed, "costs", &[])).unwrap();
        let failures = draw_failures(&mut rng_stream(seed, "faults", &[]), 1.0 / t_ideal, 0.0, GUARD_FACTOR * t_ideal);
        let (_, trace) = execute_job_traced(
            &job(t_ideal), &policy, &costs, &failures, &Predictor::new(0.02), rng_stream(seed, "prediction", &[]), true,
        ).unwrap();
        let audit = audit_trace(&trace, t_ideal);
        for f in &audit.checkpoint_fractions {
            prop_assert!((f - costs.checkpoint).abs() <= 1e-9);
        }
        for f in &audit.restore_fractions {
            prop_assert!((f - costs.restore).abs() <= 1e-9);
        }
    }
}

#[test]
fn prediction_based_beats_fixed_rate_on_paired_traces() {
    let rate = 0.008;
    let pb = run_scenario(&small_scenario(CheckpointPolicy::prediction_based(), 0.0, rate)).unwrap();
    let fr = run_scenario(&small_scenario(CheckpointPolicy::fixed_rate(), 0.0, rate)).unwrap();
    let mut wins = 0;
    let mut total = 0;
    for (a, b) in pb.replicas.iter().zip(&fr.replicas) {
        for (x, y) in a.runs.iter().zip(&b.runs) {
            assert_eq!(x.job, y.job);
            total += 1;
            wins += usize::from(x.overhead <= y.overhead);
        }
    }
    assert!(wins as f64 >= 0.9 * total as f64, "{wins}/{total}");
    let replica_wins = pb
        .replica_overheads()
        .iter()
        .zip(fr.replica_overheads())
        .filter(|(a, b)| *a <= b)
        .count();
    assert!(replica_wins >= 18, "{replica_wins}/20");
}

#[test]
fn error_tolerant_adds_at_most_one_checkpoint_per_failure_interval() {
    let mut checked = 0;
    for rate in [0.0005, 0.002, 0.008, 0.03] {
        let et = run_scenario(&small_scenario(CheckpointPolicy::error_tolerant(), 0.0, rate)).unwrap();
        let pb = run_scenario(&small_scenario(CheckpointPolicy::prediction_based(), 0.0, rate)).unwrap();
        for (a, b) in et.replicas.iter().zip(&pb.replicas) {
            for (x, y) in a.runs.iter().zip(&b.runs) {
                // same failure trace for both; one interval before each failure
                // plus the final one
                assert!(
                    x.checkpoints <= y.checkpoints + x.failures.max(y.failures) + 1,
                    "rate {rate} job {}: ET {} PB {} failures {}/{}",
                    x.job,
                    x.checkpoints,
                    y.checkpoints,
                    x.failures,
                    y.failures
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 400);
}

#[test]
fn median_overhead_grows_with_failure_rate() {
    for policy in [
        CheckpointPolicy::RestartOnly,
        CheckpointPolicy::fixed_rate(),
        CheckpointPolicy::prediction_based(),
        CheckpointPolicy::error_tolerant(),
    ] {
        let medians: Vec<f64> = [0.001, 0.002, 0.004, 0.008, 0.016]
            .iter()
            .map(|&r| run_scenario(&small_scenario(policy, 0.0, r)).unwrap().median_overhead)
            .collect();
        for w in medians.windows(2) {
            assert!(w[0] <= w[1], "{policy}: {medians:?}");
        }
    }
}

#[test]
fn calibrated_rate_reproduces_unit_slowdown() {
    let base = small_scenario(CheckpointPolicy::RestartOnly, 0.0, 0.0);
    let cal = calibrate_failure_rate(&base).unwrap();
    assert!((cal.median_overhead - 1.0).abs() <= 0.05, "{cal:?}");
    // rerunning at the reported rate gives the reported median
    let again = run_scenario(&Scenario {
        failure_rate: cal.rate,
        ..base.clone()
    })
    .unwrap();
    assert_eq!(again.median_overhead, cal.median_overhead);
    assert_eq!(calibrate_failure_rate(&base).unwrap(), cal);
}

#[test]
fn free_restore_needs_a_higher_failure_rate() {
    let base = small_scenario(CheckpointPolicy::RestartOnly, 0.0, 0.0);
    let with_cost = calibrate_failure_rate(&base).unwrap();
    let free = calibrate_failure_rate(&Scenario {
        costs: CostRanges {
            restore: (0.0, 0.0),
            ..CostRanges::default()
        },
        ..base
    })
    .unwrap();
    assert!(free.rate > with_cost.rate, "{} vs {}", free.rate, with_cost.rate);
    assert!((free.median_overhead - 1.0).abs() <= 0.05);
}

#[test]
fn calibration_rejects_other_policies() {
    assert!(calibrate_failure_rate(&small_scenario(CheckpointPolicy::fixed_rate(), 0.0, 0.0)).is_err());
}
