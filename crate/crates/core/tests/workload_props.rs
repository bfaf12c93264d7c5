use hrms_core::engine::rng_stream;
use hrms_core::workload::{generate_workload, read_workload_csv, write_workload_csv, WorkloadParams};
use proptest::prelude::*;

proptest! {
    #[test]
    fn generated_jobs_respect_their_ranges(
        seed in any::<u64>(),
        mean in 1.0f64..1e4,
        window_factor in 1.0f64..100.0,
        kernels in 1usize..4,
    ) {
        let params = WorkloadParams {
            mean_t_ideal: mean,
            window_factor,
            arrival_rate: 20.0 / (mean * window_factor),
            kernels_per_job: kernels,
            ..WorkloadParams::default()
        };
        let trace = generate_workload(&mut rng_stream(seed, "workload", &[0]), &params).unwrap();
        let again = generate_workload(&mut rng_stream(seed, "workload", &[0]), &params).unwrap();
        prop_assert_eq!(&trace, &again);
        for w in trace.jobs.windows(2) {
            prop_assert!(w[0].arrival <= w[1].arrival);
        }
        for j in &trace.jobs {
            prop_assert!(j.arrival >= 0.0 && j.arrival <= params.window());
            prop_assert!(j.t_ideal >= 0.5 * mean * (1.0 - 1e-12) && j.t_ideal <= 2.0 * mean * (1.0 + 1e-12));
            prop_assert_eq!(j.kernels.len(), kernels);
            for k in &j.kernels {
                prop_assert!(j.recipe.entry(k.id).is_some());
            }
        }
    }

    #[test]
    fn csv_round_trip_keeps_timing(seed in any::<u64>()) {
        let params = WorkloadParams { window_factor: 20.0, ..WorkloadParams::default() };
        let trace = generate_workload(&mut rng_stream(seed, "workload", &[0]), &params).unwrap();
        let mut buf = Vec::new();
        write_workload_csv(&trace, &mut buf).unwrap();
        let back = read_workload_csv(buf.as_slice(), trace.window).unwrap();
        prop_assert_eq!(back.jobs.len(), trace.jobs.len());
        for (a, b) in trace.jobs.iter().zip(&back.jobs) {
            prop_assert_eq!(a.arrival, b.arrival);
            prop_assert_eq!(a.t_ideal, b.t_ideal);
            prop_assert_eq!(a.class, b.class);
            prop_assert_eq!(a.timing, b.timing);
        }
    }
}
