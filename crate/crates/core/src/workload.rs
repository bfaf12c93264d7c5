//! Jobs, kernels with alternative implementations, timing requirements and
//! synthetic workload generation.

use std::collections::HashSet;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::platform::{Device, DeviceKind};

/// Deadline-miss probability tied to the pWCET exceedance level.
pub const DEFAULT_MISS_PROBABILITY: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid timing requirement: deadline {deadline} s, p {p}")]
    Timing { deadline: f64, p: f64 },
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("workload window is empty")]
    EmptyWindow,
    #[error("invalid workload parameter: {0}")]
    Param(String),
    #[error("kernel {0} has no implementation")]
    NoImplementation(u64),
    #[error("kernel {kernel}: base time {base} must be positive")]
    BaseTime { kernel: u64, base: f64 },
    #[error("recipe does not cover kernel {0}")]
    RecipeIncomplete(u64),
    #[error("implementation targets {implementation} but device is {device}")]
    KindMismatch {
        implementation: DeviceKind,
        device: DeviceKind,
    },
    #[error("job {0}: ideal time must be positive")]
    IdealTime(u64),
    #[error("workload csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRequirement {
    pub deadline_s: f64,
    /// Probability of meeting the deadline.
    pub p: f64,
}

impl TimingRequirement {
    pub fn new(deadline_s: f64, p: f64) -> Result<Self, WorkloadError> {
        if deadline_s > 0.0 && p > 0.0 && p < 1.0 {
            Ok(TimingRequirement { deadline_s, p })
        } else {
            Err(WorkloadError::Timing {
                deadline: deadline_s,
                p,
            })
        }
    }

    /// Tolerated deadline-miss probability, `1 - p`.
    pub fn miss_probability(&self) -> f64 {
        1.0 - self.p
    }
}

/// Named deadline classes: 15 minutes for emergency forecasts, 24 hours for
/// routine ones.
pub fn preset(name: &str) -> Result<TimingRequirement, WorkloadError> {
    let p = 1.0 - DEFAULT_MISS_PROBABILITY;
    match name {
        "urgent-nwp" => TimingRequirement::new(900.0, p),
        "batch-nwp" => TimingRequirement::new(86_400.0, p),
        other => Err(WorkloadError::UnknownPreset(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum JitterModel {
    None,
    /// Multiplicative `1 + X` with `X ~ Exp(mean = scale)`.
    Exponential { scale: f64 },
}

impl Default for JitterModel {
    fn default() -> Self {
        JitterModel::Exponential { scale: 0.05 }
    }
}

impl JitterModel {
    pub fn mean(&self) -> f64 {
        match *self {
            JitterModel::None => 0.0,
            JitterModel::Exponential { scale } => scale,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JitterModel::None => 0.0,
            JitterModel::Exponential { scale } if scale > 0.0 => {
                Exp::new(1.0 / scale).expect("positive rate").sample(rng)
            }
            JitterModel::Exponential { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Implementation {
    pub kind: DeviceKind,
    pub base_time: f64,
    #[serde(default)]
    pub jitter: JitterModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub id: u64,
    pub implementations: Vec<Implementation>,
}

impl KernelSpec {
    pub fn new(id: u64, implementations: Vec<Implementation>) -> Result<Self, WorkloadError> {
        if implementations.is_empty() {
            return Err(WorkloadError::NoImplementation(id));
        }
        if let Some(bad) = implementations.iter().find(|i| !(i.base_time > 0.0)) {
            return Err(WorkloadError::BaseTime {
                kernel: id,
                base: bad.base_time,
            });
        }
        Ok(KernelSpec {
            id,
            implementations,
        })
    }

    pub fn implementation_for(&self, kind: DeviceKind) -> Option<&Implementation> {
        self.implementations.iter().find(|i| i.kind == kind)
    }
}

/// Execution time of one kernel run:
/// `base / speed_factor * (1 + jitter)`.
pub fn sample_exec_time<R: Rng + ?Sized>(
    implementation: &Implementation,
    device: &Device,
    rng: &mut R,
) -> Result<f64, WorkloadError> {
    if implementation.kind != device.kind {
        return Err(WorkloadError::KindMismatch {
            implementation: implementation.kind,
            device: device.kind,
        });
    }
    let jitter = implementation.jitter.sample(rng);
    Ok(implementation.base_time / device.speed_factor * (1.0 + jitter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeEntry {
    pub kernel: u64,
    pub preferred: Vec<DeviceKind>,
    pub memory_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub application: String,
    pub entries: Vec<RecipeEntry>,
}

impl Recipe {
    /// A recipe preferring every implementation a kernel offers.
    pub fn covering(application: &str, kernels: &[KernelSpec]) -> Self {
        Recipe {
            application: application.to_string(),
            entries: kernels
                .iter()
                .map(|k| RecipeEntry {
                    kernel: k.id,
                    preferred: k.implementations.iter().map(|i| i.kind).collect(),
                    memory_mb: 0.0,
                })
                .collect(),
        }
    }

    pub fn entry(&self, kernel: u64) -> Option<&RecipeEntry> {
        self.entries.iter().find(|e| e.kernel == kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobClass {
    Urgent,
    Batch,
}

impl fmt::Display for JobClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobClass::Urgent => "urgent",
            JobClass::Batch => "batch",
        })
    }
}

impl FromStr for JobClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "urgent" => Ok(JobClass::Urgent),
            "batch" => Ok(JobClass::Batch),
            other => Err(format!("unknown job class '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub arrival: f64,
    /// Executed in order, one after the other.
    pub kernels: Vec<KernelSpec>,
    pub recipe: Recipe,
    /// Failure-free, overhead-free execution time. Nominal until the job is
    /// mapped, then the sum of the chosen implementation times.
    pub t_ideal: f64,
    pub timing: TimingRequirement,
    pub class: JobClass,
}

impl Job {
    pub fn new(
        id: u64,
        arrival: f64,
        kernels: Vec<KernelSpec>,
        recipe: Recipe,
        t_ideal: f64,
        timing: TimingRequirement,
        class: JobClass,
    ) -> Result<Self, WorkloadError> {
        if !(t_ideal > 0.0) {
            return Err(WorkloadError::IdealTime(id));
        }
        if let Some(k) = kernels.iter().find(|k| recipe.entry(k.id).is_none()) {
            return Err(WorkloadError::RecipeIncomplete(k.id));
        }
        Ok(Job {
            id,
            arrival,
            kernels,
            recipe,
            t_ideal,
            timing,
            class,
        })
    }

    /// A single-kernel job whose only implementation runs on a CPU for
    /// `t_ideal` seconds.
    pub fn simple(
        id: u64,
        arrival: f64,
        t_ideal: f64,
        timing: TimingRequirement,
        class: JobClass,
    ) -> Result<Self, WorkloadError> {
        let kernel = KernelSpec::new(
            0,
            vec![Implementation {
                kind: DeviceKind::Cpu,
                base_time: t_ideal,
                jitter: JitterModel::None,
            }],
        )?;
        let recipe = Recipe::covering("simple", std::slice::from_ref(&kernel));
        Job::new(id, arrival, vec![kernel], recipe, t_ideal, timing, class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMix {
    pub urgent: f64,
    pub batch: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        ClassMix {
            urgent: 0.2,
            batch: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadParams {
    pub mean_t_ideal: f64,
    pub window_factor: f64,
    /// Jobs per second.
    pub arrival_rate: f64,
    pub class_mix: ClassMix,
    pub kernels_per_job: usize,
    /// Implementations offered by each generated kernel, as
    /// `(kind, time relative to the reference implementation)`.
    pub implementations: Vec<(DeviceKind, f64)>,
    pub jitter: JitterModel,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            mean_t_ideal: 100.0,
            window_factor: 200.0,
            arrival_rate: 0.01,
            class_mix: ClassMix::default(),
            kernels_per_job: 1,
            implementations: vec![(DeviceKind::Cpu, 1.0), (DeviceKind::Gpu, 0.5)],
            jitter: JitterModel::default(),
        }
    }
}

impl WorkloadParams {
    pub fn window(&self) -> f64 {
        self.window_factor * self.mean_t_ideal
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Param(m.to_string()));
        if !(self.mean_t_ideal > 0.0) {
            return bad("mean_t_ideal must be positive");
        }
        if !(self.window_factor > 0.0) {
            return Err(WorkloadError::EmptyWindow);
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return bad("arrival_rate must be non-negative");
        }
        let mix = self.class_mix;
        if mix.urgent < 0.0 || mix.batch < 0.0 || ((mix.urgent + mix.batch) - 1.0).abs() > 1e-9 {
            return bad("class_mix must be non-negative and sum to 1");
        }
        if self.kernels_per_job == 0 {
            return bad("kernels_per_job must be at least 1");
        }
        if self.implementations.is_empty() || self.implementations.iter().any(|(_, r)| !(*r > 0.0)) {
            return bad("implementations must be non-empty with positive relative times");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadTrace {
    /// Sorted by arrival.
    pub jobs: Vec<Job>,
    pub window: f64,
}

/// Poisson arrivals over `window_factor * mean_t_ideal` seconds. Ideal times
/// are log-uniform in `[0.5, 2] * mean_t_ideal`.
pub fn generate_workload<R: Rng + ?Sized>(
    rng: &mut R,
    params: &WorkloadParams,
) -> Result<WorkloadTrace, WorkloadError> {
    params.validate()?;
    let window = params.window();
    let mut jobs = Vec::new();
    if params.arrival_rate == 0.0 {
        return Ok(WorkloadTrace { jobs, window });
    }
    let gaps = Exp::new(params.arrival_rate).map_err(|e| WorkloadError::Param(e.to_string()))?;
    let (lo, hi) = (0.5f64.ln(), 2.0f64.ln());
    let mut t = 0.0;
    loop {
        t += gaps.sample(rng);
        if t > window {
            break;
        }
        let t_ideal = params.mean_t_ideal * rng.random_range(lo..hi).exp();
        let class = if rng.random::<f64>() < params.class_mix.urgent {
            JobClass::Urgent
        } else {
            JobClass::Batch
        };
        let id = jobs.len() as u64;
        jobs.push(build_job(id, t, t_ideal, class, params)?);
    }
    Ok(WorkloadTrace { jobs, window })
}

fn class_timing(class: JobClass) -> TimingRequirement {
    match class {
        JobClass::Urgent => preset("urgent-nwp"),
        JobClass::Batch => preset("batch-nwp"),
    }
    .expect("built-in presets are valid")
}

fn build_job(
    id: u64,
    arrival: f64,
    t_ideal: f64,
    class: JobClass,
    params: &WorkloadParams,
) -> Result<Job, WorkloadError> {
    let share = t_ideal / params.kernels_per_job as f64;
    let kernels = (0..params.kernels_per_job as u64)
        .map(|k| {
            KernelSpec::new(
                k,
                params
                    .implementations
                    .iter()
                    .map(|&(kind, rel)| Implementation {
                        kind,
                        base_time: share * rel,
                        jitter: params.jitter,
                    })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let recipe = Recipe::covering("synthetic", &kernels);
    Job::new(id, arrival, kernels, recipe, t_ideal, class_timing(class), class)
}

pub const WORKLOAD_CSV_HEADER: &str = "job_id,arrival_s,t_ideal_s,class,deadline_s,p";

pub fn write_workload_csv<W: Write>(trace: &WorkloadTrace, mut out: W) -> io::Result<()> {
    writeln!(out, "{WORKLOAD_CSV_HEADER}")?;
    for j in &trace.jobs {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            j.id, j.arrival, j.t_ideal, j.class, j.timing.deadline_s, j.timing.p
        )?;
    }
    Ok(())
}

/// Reads a workload CSV. Every job becomes a single CPU kernel of `t_ideal_s`.
pub fn read_workload_csv<R: BufRead>(input: R, window: f64) -> Result<WorkloadTrace, WorkloadError> {
    let mut jobs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let csv_err = |msg: String| WorkloadError::Csv { line: line_no, msg };
        let line = line.map_err(|e| csv_err(e.to_string()))?;
        if n == 0 {
            if line.trim() != WORKLOAD_CSV_HEADER {
                return Err(csv_err(format!("expected header '{WORKLOAD_CSV_HEADER}'")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(csv_err(format!("expected 6 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, WorkloadError> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| csv_err(format!("field {}: {e}", i + 1)))
        };
        let id: u64 = fields[0]
            .parse()
            .map_err(|e| csv_err(format!("job_id: {e}")))?;
        if !seen.insert(id) {
            return Err(csv_err(format!("duplicate job id {id}")));
        }
        let class: JobClass = fields[3].parse().map_err(csv_err)?;
        let timing = TimingRequirement::new(num(4)?, num(5)?)?;
        jobs.push(Job::simple(id, num(1)?, num(2)?, timing, class)?);
    }
    jobs.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
    Ok(WorkloadTrace { jobs, window })
}
