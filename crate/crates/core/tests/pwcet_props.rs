use hrms_core::engine::rng_stream;
use hrms_core::pwcet::{estimate, fit_tail, met, pwcet_quantile, SampleSet};
use hrms_core::stats::quantile;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma};

fn exp_samples(seed: u64, n: usize, offset: f64, scale: f64) -> Vec<f64> {
    let mut rng = rng_stream(seed, "samples", &[]);
    let exp = Exp::new(1.0).unwrap();
    (0..n).map(|_| offset + scale * exp.sample(&mut rng)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_decreases_with_exceedance(seed in any::<u64>(), n in 50usize..2000, a in 1e-12f64..1e-2, b in 1e-12f64..1e-2) {
        let xs = exp_samples(seed, n, 10.0, 2.0);
        let model = fit_tail(&xs).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let q_lo = pwcet_quantile(&model, lo).unwrap();
        let q_hi = pwcet_quantile(&model, hi).unwrap();
        prop_assert!(q_lo >= q_hi);
        prop_assert!(q_hi >= model.threshold);
    }

    #[test]
    fn scaling_samples_scales_met_and_pwcet(seed in any::<u64>(), n in 50usize..2000, k in 1e-3f64..1e3) {
        // gamma shape 3: skewed, not exactly exponential
        let mut rng = rng_stream(seed, "gamma", &[]);
        let g = Gamma::new(3.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| 1.0 + g.sample(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| k * x).collect();
        let (_, ex) = estimate(&xs, 1e-6).unwrap();
        let (_, ey) = estimate(&ys, 1e-6).unwrap();
        prop_assert!((ey.met - k * ex.met).abs() <= 1e-12 * ey.met);
        prop_assert!((ey.value - k * ex.value).abs() <= 1e-9 * ey.value);
        prop_assert!((ey.relative_increase - ex.relative_increase).abs() <= 1e-9);
    }

    #[test]
    fn passing_fit_clears_the_999th_percentile(seed in any::<u64>(), n in 1000usize..5000) {
        let xs = exp_samples(seed, n, 50.0, 3.0);
        let (model, est) = estimate(&xs, 1e-6).unwrap();
        if model.cv_pass {
            prop_assert!(est.value >= quantile(&xs, 0.999).unwrap());
        }
    }

    #[test]
    fn met_is_the_sample_maximum(xs in prop::collection::vec(0.0f64..1e6, 1..500)) {
        let m = met(&xs).unwrap();
        prop_assert!(xs.iter().all(|&x| x <= m));
        prop_assert!(xs.contains(&m));
    }
}

#[test]
fn exponential_oracle_on_one_seed() {
    // Exp(1): P(X > x) = e^-x, so the 1e-6 quantile is ln(1e6)
    let oracle = 1e6f64.ln();
    let xs = exp_samples(3, 10_000, 0.0, 1.0);
    let (_, e) = estimate(&xs, 1e-6).unwrap();
    assert!((e.value - oracle).abs() / oracle < 0.1, "{}", e.value);
}

#[test]
fn too_few_samples_is_an_error() {
    assert!(fit_tail(&[1.0; 29]).is_err());
    assert!(SampleSet::read("x", "".as_bytes()).is_err());
}

#[test]
fn rate_parameter_scales_the_oracle() {
    let lambda = 4.0;
    let oracle = 1e6f64.ln() / lambda;
    let mut rng = rng_stream(11, "rate", &[]);
    let xs: Vec<f64> = (0..10_000).map(|_| -rng.random::<f64>().ln() / lambda).collect();
    let (_, e) = estimate(&xs, 1e-6).unwrap();
    assert!((e.value - oracle).abs() / oracle < 0.1, "{}", e.value);
}
