//! Measurement-based probabilistic timing analysis.
//!
//! The upper tail of a set of measured execution times is modelled as an
//! exponential above a threshold `u`:
//!
//! ```text
//! P(X > x) = p_u * exp(-(x - u) / sigma)      for x >= u
//! ```
//!
//! where `p_u` is the fraction of samples above `u` and `sigma` the mean
//! excess. The threshold is accepted when the coefficient of variation of the
//! excesses is statistically compatible with 1, the value for an exponential.

use std::io::BufRead;

use serde::Serialize;
use thiserror::Error;

use crate::stats::{mean, std_dev};

/// Exceedance probability used when none is given.
pub const DEFAULT_EXCEEDANCE: f64 = 1e-6;
pub const MIN_FIT_SAMPLES: usize = 30;
pub const MIN_EXCEEDANCES: usize = 10;
/// Candidate tail sizes as fractions of the sample count, in scan order.
pub const TAIL_FRACTIONS: [f64; 5] = [0.10, 0.08, 0.06, 0.04, 0.02];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PwcetError {
    #[error("sample set is empty")]
    Empty,
    #[error("sample {index} is not a positive execution time: {value}")]
    NonPositive { index: usize, value: f64 },
    #[error("{got} samples, at least {need} required for fitting")]
    TooFewSamples { got: usize, need: usize },
    #[error("{got} exceedances of the threshold, at least {need} required")]
    TooFewExceedances { got: usize, need: usize },
    #[error("no threshold yields a usable tail (samples are degenerate)")]
    NoValidFit,
    #[error("exceedance probability {p_e} is not in (0, {p_u}]; use an empirical quantile")]
    InsideBody { p_e: f64, p_u: f64 },
    #[error("MET must be positive, got {0}")]
    NonPositiveMet(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, PwcetError> {
        if values.is_empty() {
            return Err(PwcetError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(PwcetError::NonPositive { index, value });
        }
        Ok(SampleSet {
            label: label.into(),
            values,
        })
    }

    /// One value per line; blank lines and `#` comments are skipped.
    pub fn read<R: BufRead>(label: impl Into<String>, input: R) -> Result<Self, PwcetError> {
        let mut values = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| PwcetError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            values.push(t.parse::<f64>().map_err(|e| PwcetError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        SampleSet::new(label, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Maximum observed execution time.
pub fn met(samples: &[f64]) -> Result<f64, PwcetError> {
    samples
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(PwcetError::Empty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvTest {
    pub cv: f64,
    pub n_exceed: usize,
    pub pass: bool,
}

/// Coefficient of variation of the excesses over `u`; passes when
/// `|cv - 1| <= 1.96 / sqrt(n_exceed)`.
pub fn cv_test(samples: &[f64], u: f64) -> Result<CvTest, PwcetError> {
    let excess: Vec<f64> = samples.iter().filter(|&&x| x > u).map(|&x| x - u).collect();
    if excess.len() < MIN_EXCEEDANCES {
        return Err(PwcetError::TooFewExceedances {
            got: excess.len(),
            need: MIN_EXCEEDANCES,
        });
    }
    let m = mean(&excess).expect("non-empty");
    let cv = std_dev(&excess).expect("at least two values") / m;
    let bound = 1.96 / (excess.len() as f64).sqrt();
    Ok(CvTest {
        cv,
        n_exceed: excess.len(),
        pass: (cv - 1.0).abs() <= bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailModel {
    pub threshold: f64,
    pub sigma: f64,
    pub n_total: usize,
    pub n_exceed: usize,
    pub cv: f64,
    /// False when no candidate threshold passed the CV test and the closest
    /// one was kept.
    pub cv_pass: bool,
}

impl TailModel {
    /// Fraction of samples above the threshold.
    pub fn p_u(&self) -> f64 {
        self.n_exceed as f64 / self.n_total as f64
    }
}

/// Scans the candidate tail sizes in order and keeps the first threshold
/// whose excesses pass the CV test, or the one with the smallest `|cv - 1|`.
pub fn fit_tail(samples: &[f64]) -> Result<TailModel, PwcetError> {
    let n = samples.len();
    if n < MIN_FIT_SAMPLES {
        return Err(PwcetError::TooFewSamples {
            got: n,
            need: MIN_FIT_SAMPLES,
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut fallback: Option<TailModel> = None;
    for frac in TAIL_FRACTIONS {
        let k = ((frac * n as f64).ceil() as usize).clamp(MIN_EXCEEDANCES, n - 1);
        let u = sorted[n - k - 1];
        let test = match cv_test(&sorted, u) {
            Ok(t) => t,
            Err(PwcetError::TooFewExceedances { .. }) => continue,
            Err(e) => return Err(e),
        };
        let sigma = sorted.iter().filter(|&&x| x > u).map(|&x| x - u).sum::<f64>() / test.n_exceed as f64;
        if !(sigma > 0.0 && test.cv.is_finite()) {
            continue;
        }
        let model = TailModel {
            threshold: u,
            sigma,
            n_total: n,
            n_exceed: test.n_exceed,
            cv: test.cv,
            cv_pass: test.pass,
        };
        if test.pass {
            return Ok(model);
        }
        if fallback.is_none_or(|f| (model.cv - 1.0).abs() < (f.cv - 1.0).abs()) {
            fallback = Some(model);
        }
    }
    fallback.ok_or(PwcetError::NoValidFit)
}

/// `u + sigma * ln(p_u / p_e)`.
pub fn pwcet_quantile(model: &TailModel, p_e: f64) -> Result<f64, PwcetError> {
    let p_u = model.p_u();
    if !(p_e > 0.0 && p_e <= p_u) {
        return Err(PwcetError::InsideBody { p_e, p_u });
    }
    Ok(model.threshold + model.sigma * (p_u / p_e).ln())
}

pub fn relative_increase(pwcet_value: f64, met_value: f64) -> Result<f64, PwcetError> {
    if !(met_value > 0.0) {
        return Err(PwcetError::NonPositiveMet(met_value));
    }
    Ok((pwcet_value - met_value) / met_value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PwcetEstimate {
    pub p_e: f64,
    pub value: f64,
    pub met: f64,
    pub relative_increase: f64,
}

/// Fits the tail and evaluates the estimate against the MET of the same
/// samples.
pub fn estimate(samples: &[f64], p_e: f64) -> Result<(TailModel, PwcetEstimate), PwcetError> {
    let model = fit_tail(samples)?;
    let value = pwcet_quantile(&model, p_e)?;
    let met_value = met(samples)?;
    Ok((
        model,
        PwcetEstimate {
            p_e,
            value,
            met: met_value,
            relative_increase: relative_increase(value, met_value)?,
        },
    ))
}

/// One row of the fit report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub label: String,
    pub model: TailModel,
    pub estimate: PwcetEstimate,
}

impl FitReport {
    pub fn from_samples(set: &SampleSet, p_e: f64) -> Result<Self, PwcetError> {
        let (model, estimate) = estimate(&set.values, p_e)?;
        Ok(FitReport {
            label: set.label.clone(),
            model,
            estimate,
        })
    }

    pub fn csv_header(p_e: f64) -> String {
        format!("label,n,u,sigma,cv,pass,met,pwcet_{p_e:e},rel_increase")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.label,
            self.model.n_total,
            self.model.threshold,
            self.model.sigma,
            self.model.cv,
            self.model.cv_pass,
            self.estimate.met,
            self.estimate.value,
            self.estimate.relative_increase
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::rng_stream;
    use rand_distr::{Distribution, Exp1};

    fn exp_samples(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rng_stream(seed, "pwcet", &[]);
        (0..n).map(|_| Exp1.sample(&mut rng)).collect()
    }

    #[test]
    fn met_values() {
        assert_eq!(met(&[3.0, 1.0, 2.0]), Ok(3.0));
        assert_eq!(met(&[7.5]), Ok(7.5));
        assert_eq!(met(&[]), Err(PwcetError::Empty));
    }

    #[test]
    fn equal_exceedances_fail_cv() {
        let mut xs = vec![1.0; 20];
        xs.extend(std::iter::repeat_n(2.0, 12));
        let t = cv_test(&xs, 1.0).unwrap();
        assert_eq!(t.cv, 0.0);
        assert!(!t.pass);
    }

    #[test]
    fn exponential_exceedances_pass_cv() {
        let xs = exp_samples(1, 10_000);
        let t = cv_test(&xs, 0.0).unwrap();
        assert!((t.cv - 1.0).abs() <= 1.96 / 100.0, "{}", t.cv);
        assert!(t.pass);
    }

    #[test]
    fn uniform_exceedances_fail_cv() {
        let mut rng = rng_stream(2, "pwcet", &[]);
        use rand::Rng;
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let t = cv_test(&xs, 0.0).unwrap();
        // cv of U(0,1) is 1/sqrt(3)
        assert!((t.cv - 0.57735).abs() < 0.01, "{}", t.cv);
        assert!(!t.pass);
    }

    #[test]
    fn too_few_exceedances() {
        assert!(matches!(
            cv_test(&[1.0, 2.0, 3.0], 0.0),
            Err(PwcetError::TooFewExceedances { got: 3, .. })
        ));
    }

    #[test]
    fn exponential_scale_recovered() {
        let m = fit_tail(&exp_samples(3, 10_000)).unwrap();
        assert!((m.sigma - 1.0).abs() < 0.1, "{}", m.sigma);
    }

    #[test]
    fn constant_samples_have_no_fit() {
        assert_eq!(fit_tail(&[5.0; 100]), Err(PwcetError::NoValidFit));
    }

    #[test]
    fn small_sets_rejected() {
        assert!(matches!(
            fit_tail(&[1.0; 29]),
            Err(PwcetError::TooFewSamples { got: 29, .. })
        ));
    }

    #[test]
    fn fit_is_deterministic() {
        let xs = exp_samples(4, 2000);
        assert_eq!(fit_tail(&xs).unwrap(), fit_tail(&xs).unwrap());
    }

    fn model(u: f64, sigma: f64, n_exceed: usize, n_total: usize) -> TailModel {
        TailModel {
            threshold: u,
            sigma,
            n_total,
            n_exceed,
            cv: 1.0,
            cv_pass: true,
        }
    }

    #[test]
    fn analytic_quantile() {
        let v = pwcet_quantile(&model(0.0, 1.0, 100, 100), 1e-6).unwrap();
        assert!((v - 13.815510557964274).abs() < 1e-12);
    }

    #[test]
    fn quantile_at_tail_fraction_is_threshold() {
        let m = model(4.0, 2.0, 10, 100);
        assert_eq!(pwcet_quantile(&m, 0.1).unwrap(), 4.0);
        assert!(matches!(pwcet_quantile(&m, 0.2), Err(PwcetError::InsideBody { .. })));
        assert!(pwcet_quantile(&m, 0.0).is_err());
    }

    #[test]
    fn quantile_linear_in_sigma() {
        let a = pwcet_quantile(&model(3.0, 1.5, 50, 1000), 1e-6).unwrap();
        let b = pwcet_quantile(&model(3.0, 3.0, 50, 1000), 1e-6).unwrap();
        assert!(((b - 3.0) - 2.0 * (a - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn relative_increase_values() {
        assert_eq!(relative_increase(5.0, 5.0), Ok(0.0));
        assert!((relative_increase(1.1 * 8.0, 8.0).unwrap() - 0.1).abs() < 1e-12);
        assert!(relative_increase(1.0, 0.0).is_err());
    }

    #[test]
    fn sample_file_parsing() {
        let text = "# runs\n1.5\n\n2.5\n";
        let s = SampleSet::read("code", text.as_bytes()).unwrap();
        assert_eq!(s.values, vec![1.5, 2.5]);
        assert!(SampleSet::read("x", "".as_bytes()).is_err());
        assert!(SampleSet::read("x", "abc\n".as_bytes()).is_err());
        assert!(SampleSet::new("x", vec![1.0, -2.0]).is_err());
    }

    #[test]
    fn report_row_format() {
        let set = SampleSet::new("heap", exp_samples(5, 1000)).unwrap();
        let r = FitReport::from_samples(&set, DEFAULT_EXCEEDANCE).unwrap();
        assert_eq!(
            FitReport::csv_header(DEFAULT_EXCEEDANCE),
            "label,n,u,sigma,cv,pass,met,pwcet_1e-6,rel_increase"
        );
        assert!(r.csv_row().starts_with("heap,1000,"));
        assert_eq!(r.csv_row().split(',').count(), 9);
    }
}
