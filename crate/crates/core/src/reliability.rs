//! Fault injection, failure-time prediction, checkpoint policies and the
//! single-job execution automaton.
//!
//! A job alternates between running, checkpointing and restoring. Work only
//! advances while running. A completed checkpoint makes the current progress
//! durable; a failure rolls progress back to the durable point (or to zero for
//! restart-only) and costs a restore of `r * T_ideal` seconds.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{rng_stream, Engine, EngineError, Event, EventKind, EventQueue, SimTrace};
use crate::stats::{median, quantile};
use crate::workload::{generate_workload, Job, WorkloadError, WorkloadParams};

/// A run is abandoned once `T_exe` exceeds this multiple of `T_ideal`.
pub const GUARD_FACTOR: f64 = 1000.0;

/// Default multiple of the checkpoint time used as the fixed-rate interval.
pub const FIXED_RATE_INTERVAL_FACTOR: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReliabilityError {
    #[error("job {job} did not terminate within {guard}x its ideal time ({t_ideal} s); {failures} failures so far")]
    NonTerminating {
        job: u64,
        t_ideal: f64,
        guard: f64,
        failures: u64,
    },
    #[error("invalid cost parameters: checkpoint {c}, restore {r}")]
    Costs { c: f64, r: f64 },
    #[error("invalid fault model: {0}")]
    FaultModel(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("no failure rate in [{lo:e}, {hi:e}] /s brackets the target slowdown {target}")]
    NoBracket { lo: f64, hi: f64, target: f64 },
    #[error("calibration requires the restart-only policy")]
    CalibrationPolicy,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// Failure rate at a reference temperature, scaled exponentially with the
/// temperature difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    pub base_mttf: f64,
    pub t_ref: f64,
    /// Thermal sensitivity, 1/K.
    pub beta: f64,
}

impl FaultModel {
    pub fn new(base_mttf: f64, t_ref: f64, beta: f64) -> Result<Self, ReliabilityError> {
        if !(base_mttf > 0.0) {
            return Err(ReliabilityError::FaultModel("base MTTF must be positive".into()));
        }
        if !(beta >= 0.0) {
            return Err(ReliabilityError::FaultModel("beta must be non-negative".into()));
        }
        Ok(FaultModel {
            base_mttf,
            t_ref,
            beta,
        })
    }

    pub fn from_rate(rate: f64, t_ref: f64, beta: f64) -> Result<Self, ReliabilityError> {
        Self::new(1.0 / rate, t_ref, beta)
    }
}

pub fn effective_failure_rate(model: &FaultModel, temp: f64) -> f64 {
    (model.beta * (temp - model.t_ref)).exp() / model.base_mttf
}

/// Homogeneous Poisson failure times in `(start, horizon]`.
///
/// Gaps are unit exponentials divided by `rate`, so the same stream yields
/// proportionally scaled failure times for different rates.
pub fn draw_failures<R: Rng + ?Sized>(rng: &mut R, rate: f64, start: f64, horizon: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if !(rate > 0.0) {
        return out;
    }
    let mut t = start;
    loop {
        let gap: f64 = Exp1.sample(rng);
        t += gap / rate;
        if t > horizon {
            return out;
        }
        out.push(t);
    }
}

/// Failure-time predictor with signed relative error uniform in `[-eps, eps]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub epsilon: f64,
}

impl Predictor {
    pub fn new(epsilon: f64) -> Self {
        Predictor { epsilon }
    }

    /// Draws the relative error. One uniform draw per call regardless of
    /// epsilon, so streams stay aligned across error levels.
    pub fn draw_error<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random_range(-1.0..=1.0);
        self.epsilon * u
    }
}

pub fn predict<R: Rng + ?Sized>(true_ttf: f64, predictor: &Predictor, rng: &mut R) -> f64 {
    true_ttf * (1.0 + predictor.draw_error(rng))
}

pub const DEFAULT_TOLERANT_FRACTION: f64 = 0.9;

/// Default lead of the prediction-based policy, in checkpoint durations.
pub const DEFAULT_PREDICTION_LEAD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    RestartOnly,
    /// `interval: None` means `20 * c * T_ideal`, measured in completed work.
    FixedRate {
        #[serde(default)]
        interval: Option<f64>,
    },
    /// The checkpoint completes `lead` checkpoint durations before the
    /// predicted failure; `lead = 0` finishes exactly on it.
    PredictionBased {
        #[serde(default = "default_lead")]
        lead: f64,
    },
    ErrorTolerant {
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
}

fn default_lead() -> f64 {
    DEFAULT_PREDICTION_LEAD
}

fn default_fraction() -> f64 {
    DEFAULT_TOLERANT_FRACTION
}

impl CheckpointPolicy {
    pub fn fixed_rate() -> Self {
        CheckpointPolicy::FixedRate { interval: None }
    }

    pub fn prediction_based() -> Self {
        CheckpointPolicy::PredictionBased {
            lead: DEFAULT_PREDICTION_LEAD,
        }
    }

    pub fn error_tolerant() -> Self {
        CheckpointPolicy::ErrorTolerant {
            fraction: DEFAULT_TOLERANT_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<(), ReliabilityError> {
        match *self {
            CheckpointPolicy::FixedRate { interval: Some(i) } if !(i > 0.0) => {
                Err(ReliabilityError::Policy("fixed-rate interval must be positive".into()))
            }
            CheckpointPolicy::PredictionBased { lead } if !(lead >= 0.0 && lead.is_finite()) => {
                Err(ReliabilityError::Policy("prediction-based lead must be finite and >= 0".into()))
            }
            CheckpointPolicy::ErrorTolerant { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                Err(ReliabilityError::Policy("error-tolerant fraction must be in (0,1)".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn uses_prediction(&self) -> bool {
        matches!(
            self,
            CheckpointPolicy::PredictionBased { .. } | CheckpointPolicy::ErrorTolerant { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            CheckpointPolicy::RestartOnly => "restart-only",
            CheckpointPolicy::FixedRate { .. } => "fixed-rate",
            CheckpointPolicy::PredictionBased { .. } => "prediction-based",
            CheckpointPolicy::ErrorTolerant { .. } => "error-tolerant",
        }
    }
}

impl fmt::Display for CheckpointPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckpointPolicy {
    type Err = ReliabilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "restart-only" => Ok(CheckpointPolicy::RestartOnly),
            "fixed-rate" => Ok(CheckpointPolicy::fixed_rate()),
            "prediction-based" => Ok(CheckpointPolicy::prediction_based()),
            "error-tolerant" => Ok(CheckpointPolicy::error_tolerant()),
            other => Err(ReliabilityError::Policy(format!("unknown policy '{other}'"))),
        }
    }
}

/// Checkpoint and restore costs as fractions of `T_ideal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub checkpoint: f64,
    pub restore: f64,
}

impl CostParams {
    /// Requires `0 < c < r < 1`; `r = 0` (free restart) is also accepted.
    pub fn new(checkpoint: f64, restore: f64) -> Result<Self, ReliabilityError> {
        let ok = checkpoint > 0.0
            && checkpoint < 1.0
            && (0.0..1.0).contains(&restore)
            && (restore == 0.0 || checkpoint < restore);
        if ok {
            Ok(CostParams {
                checkpoint,
                restore,
            })
        } else {
            Err(ReliabilityError::Costs {
                c: checkpoint,
                r: restore,
            })
        }
    }
}

/// Ranges the per-job costs are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostRanges {
    pub checkpoint: (f64, f64),
    pub restore: (f64, f64),
    /// Fine-grain FPGA checkpointing: only this fraction of the state is
    /// saved, scaling the checkpoint cost.
    pub permanent_state_fraction: Option<f64>,
}

impl Default for CostRanges {
    fn default() -> Self {
        CostRanges {
            checkpoint: (0.015, 0.02),
            restore: (0.15, 0.20),
            permanent_state_fraction: None,
        }
    }
}

impl CostRanges {
    pub fn validate(&self) -> Result<(), ReliabilityError> {
        let (c0, c1) = self.checkpoint;
        let (r0, r1) = self.restore;
        if !(c0 <= c1 && r0 <= r1) {
            return Err(ReliabilityError::Costs { c: c0, r: r0 });
        }
        if let Some(f) = self.permanent_state_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ReliabilityError::Costs { c: f, r: r0 });
            }
        }
        CostParams::new(c0, r0)?;
        CostParams::new(c1, r1)?;
        // every combination inside the box must be valid too
        CostParams::new(c1, r0)?;
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CostParams, ReliabilityError> {
        let span = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
        let mut c = span(self.checkpoint, rng.random::<f64>());
        let r = span(self.restore, rng.random::<f64>());
        if let Some(f) = self.permanent_state_fraction {
            c *= f;
        }
        CostParams::new(c, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Running { since: f64 },
    Checkpointing { started: f64, until: f64 },
    Restoring { started: f64, until: f64 },
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecState {
    pub progress: f64,
    pub durable: f64,
    pub mode: Mode,
    pub t_ideal: f64,
}

/// A failure forecast made at `reference`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub reference: f64,
    /// Predicted time to failure, measured from `reference`.
    pub ttf: f64,
    /// Predicted failure instant.
    pub at: f64,
}

/// A planned checkpoint: when it starts and when it is expected to finish.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedCheckpoint {
    pub start: f64,
    pub done: f64,
}

/// When the next checkpoint should start while the job is running at `now`.
pub fn next_checkpoint(
    policy: &CheckpointPolicy,
    state: &ExecState,
    costs: &CostParams,
    now: f64,
    prediction: Option<&Prediction>,
) -> Option<PlannedCheckpoint> {
    let cost = costs.checkpoint * state.t_ideal;
    let immediate = |start: f64| PlannedCheckpoint {
        start,
        done: start + cost,
    };
    match *policy {
        CheckpointPolicy::RestartOnly => None,
        CheckpointPolicy::FixedRate { interval } => {
            let interval = interval.unwrap_or(FIXED_RATE_INTERVAL_FACTOR * cost);
            let due_work = state.durable + interval;
            (due_work < state.t_ideal)
                .then(|| immediate(now + (due_work - state.progress).max(0.0)))
        }
        CheckpointPolicy::PredictionBased { lead } => {
            let p = prediction?;
            let target = p.at - lead * cost;
            let start = target - cost;
            Some(if start >= now {
                PlannedCheckpoint { start, done: target }
            } else {
                immediate(now)
            })
        }
        CheckpointPolicy::ErrorTolerant { fraction } => {
            let p = prediction?;
            Some(immediate((p.reference + fraction * p.ttf).max(now)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunMetrics {
    pub job: u64,
    pub t_exe: f64,
    pub t_ideal: f64,
    pub overhead: f64,
    pub failures: u64,
    pub checkpoints: u64,
    pub checkpoints_started: u64,
    pub running_time: f64,
    pub checkpoint_time: f64,
    pub restore_time: f64,
    pub deadline_met: bool,
}

#[derive(Clone)]
struct RunCore {
    job: u64,
    policy: CheckpointPolicy,
    costs: CostParams,
    predictor: Predictor,
    rng: ChaCha8Rng,
    failures: Vec<f64>,
    next_failure: usize,
    pending_failure: Option<(u64, f64)>,
    pending_internal: Option<u64>,
    planned_done: f64,
    prediction: Option<Prediction>,
    prediction_used: bool,
    state: ExecState,
    start: f64,
    guard_until: f64,
    done_at: Option<f64>,
    n_failures: u64,
    n_checkpoints: u64,
    n_started: u64,
    running_time: f64,
    checkpoint_time: f64,
    restore_time: f64,
}

impl RunCore {
    fn restore_cost(&self) -> f64 {
        self.costs.restore * self.state.t_ideal
    }

    fn schedule_next_failure(&mut self, q: &mut EventQueue) -> Result<(), EngineError> {
        self.pending_failure = None;
        if let Some(&t) = self.failures.get(self.next_failure) {
            if t <= self.guard_until {
                let seq = q.schedule(
                    t,
                    EventKind::Failure {
                        node: 0,
                        device: None,
                        job: Some(self.job),
                    },
                )?;
                self.pending_failure = Some((seq, t));
            }
        }
        Ok(())
    }

    /// Internal transitions at the same instant as a failure take effect
    /// first: the failure is re-queued behind them.
    fn schedule_internal(&mut self, q: &mut EventQueue, t: f64, kind: EventKind) -> Result<(), EngineError> {
        let seq = q.schedule(t, kind)?;
        self.pending_internal = Some(seq);
        if let Some((fseq, ft)) = self.pending_failure {
            if ft == t {
                q.cancel(fseq);
                let node_event = EventKind::Failure {
                    node: 0,
                    device: None,
                    job: Some(self.job),
                };
                self.pending_failure = Some((q.schedule(ft, node_event)?, ft));
            }
        }
        Ok(())
    }

    fn rearm(&mut self, now: f64, q: &mut EventQueue) -> Result<(), EngineError> {
        if !self.policy.uses_prediction() {
            return Ok(());
        }
        self.prediction_used = false;
        self.prediction = self.failures[self.next_failure..]
            .iter()
            .find(|&&f| f > now)
            .copied()
            .map(|true_at| {
                let true_ttf = true_at - now;
                let err = self.predictor.draw_error(&mut self.rng);
                Prediction {
                    reference: now,
                    ttf: true_ttf * (1.0 + err),
                    at: true_at + err * true_ttf,
                }
            });
        q.schedule(now, EventKind::PredictionRearm { job: self.job })?;
        Ok(())
    }

    fn schedule_progress(&mut self, now: f64, q: &mut EventQueue) -> Result<(), EngineError> {
        let completion = now + (self.state.t_ideal - self.state.progress);
        let prediction = if self.prediction_used {
            None
        } else {
            self.prediction.as_ref()
        };
        let plan = next_checkpoint(&self.policy, &self.state, &self.costs, now, prediction);
        match plan {
            Some(p) if p.start < completion => {
                self.planned_done = p.done;
                self.schedule_internal(q, p.start, EventKind::CheckpointStart { job: self.job })
            }
            _ => self.schedule_internal(q, completion, EventKind::JobDone { job: self.job }),
        }
    }

    fn handle(&mut self, event: &Event, q: &mut EventQueue) -> Result<(), ReliabilityError> {
        let now = event.time.secs();
        if now > self.guard_until {
            return Err(self.non_terminating());
        }
        match event.kind {
            EventKind::Failure { .. } => self.on_failure(now, q)?,
            EventKind::RestoreDone { .. } => {
                self.pending_internal = None;
                self.restore_time += now - self.mode_start();
                self.state.mode = Mode::Running { since: now };
                self.schedule_progress(now, q)?;
            }
            EventKind::CheckpointStart { .. } => {
                self.pending_internal = None;
                self.settle_running(now);
                self.prediction_used = true;
                if self.state.progress <= self.state.durable {
                    // nothing new to save
                    self.state.mode = Mode::Running { since: now };
                    self.schedule_progress(now, q)?;
                } else {
                    let until = self.planned_done.max(now);
                    self.n_started += 1;
                    self.state.mode = Mode::Checkpointing { started: now, until };
                    self.schedule_internal(q, until, EventKind::CheckpointDone { job: self.job })?;
                }
            }
            EventKind::CheckpointDone { .. } => {
                self.pending_internal = None;
                self.checkpoint_time += now - self.mode_start();
                self.state.durable = self.state.progress;
                self.n_checkpoints += 1;
                self.state.mode = Mode::Running { since: now };
                self.rearm(now, q)?;
                self.schedule_progress(now, q)?;
            }
            EventKind::JobDone { .. } => {
                self.pending_internal = None;
                self.settle_running(now);
                self.state.progress = self.state.t_ideal;
                self.state.mode = Mode::Done;
                self.done_at = Some(now);
                if let Some((seq, _)) = self.pending_failure.take() {
                    q.cancel(seq);
                }
            }
            EventKind::PredictionRearm { .. } => {}
            EventKind::JobArrival { .. } | EventKind::TempStep { .. } => {}
        }
        Ok(())
    }

    fn mode_start(&self) -> f64 {
        match self.state.mode {
            Mode::Running { since } => since,
            Mode::Checkpointing { started, .. } | Mode::Restoring { started, .. } => started,
            Mode::Done => self.done_at.unwrap_or(self.start),
        }
    }

    fn settle_running(&mut self, now: f64) {
        if let Mode::Running { since } = self.state.mode {
            let worked = now - since;
            self.running_time += worked;
            self.state.progress = (self.state.progress + worked).min(self.state.t_ideal);
        }
    }

    fn on_failure(&mut self, now: f64, q: &mut EventQueue) -> Result<(), ReliabilityError> {
        self.pending_failure = None;
        self.next_failure += 1;
        self.n_failures += 1;
        match self.state.mode {
            Mode::Running { .. } => self.settle_running(now),
            Mode::Checkpointing { started, .. } => self.checkpoint_time += now - started,
            Mode::Restoring { started, .. } => self.restore_time += now - started,
            Mode::Done => return Ok(()),
        }
        if let Some(seq) = self.pending_internal.take() {
            q.cancel(seq);
        }
        if self.policy == CheckpointPolicy::RestartOnly {
            self.state.durable = 0.0;
        }
        self.state.progress = self.state.durable;
        let until = now + self.restore_cost();
        self.state.mode = Mode::Restoring { started: now, until };
        self.schedule_internal(q, until, EventKind::RestoreDone { job: self.job })?;
        self.rearm(now, q)?;
        self.schedule_next_failure(q)?;
        Ok(())
    }

    fn non_terminating(&self) -> ReliabilityError {
        ReliabilityError::NonTerminating {
            job: self.job,
            t_ideal: self.state.t_ideal,
            guard: GUARD_FACTOR,
            failures: self.n_failures,
        }
    }
}

/// Incrementally advanced execution of one job.
#[derive(Clone)]
pub struct JobRun {
    engine: Engine,
    core: RunCore,
}

/// Inputs of a single job execution.
#[derive(Clone)]
pub struct RunSpec {
    pub job: u64,
    pub start: f64,
    pub t_ideal: f64,
    /// Work already durable when the run starts.
    pub initial_progress: f64,
    pub policy: CheckpointPolicy,
    pub costs: CostParams,
    pub predictor: Predictor,
    pub traced: bool,
}

impl JobRun {
    /// `failures` are absolute failure instants, sorted ascending.
    pub fn new(spec: RunSpec, failures: Vec<f64>, rng: ChaCha8Rng) -> Result<Self, ReliabilityError> {
        spec.policy.validate()?;
        let mut engine = if spec.traced {
            Engine::new()
        } else {
            Engine::untraced()
        };
        engine.run_until(spec.start, |_, _| Ok::<_, EngineError>(()))?;
        let first = failures.partition_point(|&f| f <= spec.start);
        let progress = spec.initial_progress.clamp(0.0, spec.t_ideal);
        let mut core = RunCore {
            job: spec.job,
            policy: spec.policy,
            costs: spec.costs,
            predictor: spec.predictor,
            rng,
            failures,
            next_failure: first,
            pending_failure: None,
            pending_internal: None,
            planned_done: 0.0,
            prediction: None,
            prediction_used: false,
            state: ExecState {
                progress,
                durable: progress,
                mode: Mode::Running { since: spec.start },
                t_ideal: spec.t_ideal,
            },
            start: spec.start,
            guard_until: spec.start + GUARD_FACTOR * spec.t_ideal,
            done_at: None,
            n_failures: 0,
            n_checkpoints: 0,
            n_started: 0,
            running_time: 0.0,
            checkpoint_time: 0.0,
            restore_time: 0.0,
        };
        let q = &mut engine.queue;
        core.schedule_next_failure(q)?;
        core.rearm(spec.start, q)?;
        core.schedule_progress(spec.start, q)?;
        Ok(JobRun { engine, core })
    }

    pub fn now(&self) -> f64 {
        self.engine.now().secs()
    }

    pub fn state(&self) -> &ExecState {
        &self.core.state
    }

    pub fn is_done(&self) -> bool {
        self.core.done_at.is_some()
    }

    pub fn done_at(&self) -> Option<f64> {
        self.core.done_at
    }

    pub fn trace(&self) -> &SimTrace {
        self.engine.trace()
    }

    pub fn costs(&self) -> &CostParams {
        &self.core.costs
    }

    /// Failures seen so far, including ones that hit a restore.
    pub fn failures(&self) -> u64 {
        self.core.n_failures
    }

    /// Completed checkpoints so far.
    pub fn checkpoints(&self) -> u64 {
        self.core.n_checkpoints
    }

    /// Processes job events up to and including `t`.
    pub fn run_until(&mut self, t: f64) -> Result<(), ReliabilityError> {
        let core = &mut self.core;
        let horizon = t.min(core.guard_until);
        self.engine.run_until(horizon, |ev, q| core.handle(ev, q))?;
        if t > core.guard_until && core.done_at.is_none() {
            return Err(core.non_terminating());
        }
        if let Mode::Running { .. } = core.state.mode {
            // progress visible to callers up to the horizon
            let now = self.engine.now().secs();
            core.settle_running(now);
            core.state.mode = Mode::Running { since: now };
        }
        Ok(())
    }

    pub fn run_to_completion(&mut self) -> Result<RunMetrics, ReliabilityError> {
        self.run_until(f64::INFINITY)?;
        Ok(self.metrics(f64::INFINITY).expect("completed run has metrics"))
    }

    /// Completion time assuming no further injected failures.
    pub fn projected_completion(&self) -> Result<f64, ReliabilityError> {
        let mut probe = self.clone();
        probe.engine = {
            let mut e = Engine::untraced();
            e.queue = self.engine.queue.clone();
            e
        };
        probe.run_to_completion()?;
        // the exact instant, so running up to it is guaranteed to finish
        Ok(probe.done_at().expect("completed run"))
    }

    /// Adds an unpredicted failure at `at` (not earlier than now).
    pub fn inject_failure(&mut self, at: f64) -> Result<(), ReliabilityError> {
        let core = &mut self.core;
        let q = &mut self.engine.queue;
        if at < q.now().secs() {
            return Err(EngineError::Causality {
                event: at,
                now: q.now().secs(),
            }
            .into());
        }
        let idx = core.next_failure + core.failures[core.next_failure..].partition_point(|&f| f < at);
        core.failures.insert(idx, at);
        if let Some((seq, _)) = core.pending_failure {
            q.cancel(seq);
        }
        if core.done_at.is_none() {
            core.schedule_next_failure(q)?;
        }
        Ok(())
    }

    pub fn metrics(&self, deadline: f64) -> Option<RunMetrics> {
        let c = &self.core;
        let done = c.done_at?;
        let t_exe = done - c.start;
        let t_ideal = c.state.t_ideal;
        Some(RunMetrics {
            job: c.job,
            t_exe,
            t_ideal,
            overhead: ((t_exe - t_ideal) / t_ideal).max(0.0),
            failures: c.n_failures,
            checkpoints: c.n_checkpoints,
            checkpoints_started: c.n_started,
            running_time: c.running_time,
            checkpoint_time: c.checkpoint_time,
            restore_time: c.restore_time,
            deadline_met: t_exe <= deadline,
        })
    }
}

/// Runs one job from its arrival to completion.
pub fn execute_job(
    job: &Job,
    policy: &CheckpointPolicy,
    costs: &CostParams,
    failure_times: &[f64],
    predictor: &Predictor,
    rng: ChaCha8Rng,
) -> Result<RunMetrics, ReliabilityError> {
    let (metrics, _) = execute_job_traced(job, policy, costs, failure_times, predictor, rng, false)?;
    Ok(metrics)
}

pub fn execute_job_traced(
    job: &Job,
    policy: &CheckpointPolicy,
    costs: &CostParams,
    failure_times: &[f64],
    predictor: &Predictor,
    rng: ChaCha8Rng,
    traced: bool,
) -> Result<(RunMetrics, SimTrace), ReliabilityError> {
    let spec = RunSpec {
        job: job.id,
        start: job.arrival,
        t_ideal: job.t_ideal,
        initial_progress: 0.0,
        policy: *policy,
        costs: *costs,
        predictor: *predictor,
        traced,
    };
    let mut run = JobRun::new(spec, failure_times.to_vec(), rng)?;
    run.run_to_completion()?;
    let metrics = run
        .metrics(job.timing.deadline_s)
        .expect("completed run has metrics");
    Ok((metrics, run.engine.into_trace()))
}

/// Measured checkpoint and restore durations of one job trace, as fractions
/// of `T_ideal`. Only uninterrupted intervals are reported.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostAudit {
    pub checkpoint_fractions: Vec<f64>,
    pub restore_fractions: Vec<f64>,
}

pub fn audit_trace(trace: &SimTrace, t_ideal: f64) -> CostAudit {
    let mut audit = CostAudit::default();
    let mut ckpt_start = None;
    let mut fail_at = None;
    for e in trace.iter() {
        let t = e.time.secs();
        match e.kind {
            EventKind::CheckpointStart { .. } => ckpt_start = Some(t),
            EventKind::CheckpointDone { .. } => {
                if let Some(s) = ckpt_start.take() {
                    audit.checkpoint_fractions.push((t - s) / t_ideal);
                }
            }
            EventKind::Failure { .. } => {
                ckpt_start = None;
                fail_at = Some(t);
            }
            EventKind::RestoreDone { .. } => {
                if let Some(f) = fail_at.take() {
                    audit.restore_fractions.push((t - f) / t_ideal);
                }
            }
            _ => {}
        }
    }
    audit
}

/// One policy/error-level configuration of the checkpointing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub workload: WorkloadParams,
    pub costs: CostRanges,
    pub policy: CheckpointPolicy,
    pub epsilon: f64,
    pub failure_rate: f64,
    pub replicas: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            workload: WorkloadParams::default(),
            costs: CostRanges::default(),
            policy: CheckpointPolicy::RestartOnly,
            epsilon: 0.0,
            failure_rate: 0.0,
            replicas: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaOutcome {
    pub runs: Vec<RunMetrics>,
    /// Mean per-job overhead.
    pub overhead: f64,
    pub deadline_miss_fraction: f64,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub replicas: Vec<ReplicaOutcome>,
    pub median_overhead: f64,
    pub iqr: f64,
}

impl ScenarioResult {
    pub fn replica_overheads(&self) -> Vec<f64> {
        self.replicas.iter().map(|r| r.overhead).collect()
    }

    pub fn deadline_miss_fraction(&self) -> f64 {
        let total: usize = self.replicas.iter().map(|r| r.runs.len() + r.aborted).sum();
        if total == 0 {
            return 0.0;
        }
        let missed: f64 = self
            .replicas
            .iter()
            .map(|r| r.deadline_miss_fraction * (r.runs.len() + r.aborted) as f64)
            .sum();
        missed / total as f64
    }
}

/// Runs replica `index` of a scenario. Workload, costs, failures and
/// predictions come from separate streams keyed by replica and job, so every
/// policy and error level sees the same jobs and the same failures.
pub fn run_replica(scenario: &Scenario, index: usize) -> Result<ReplicaOutcome, ReliabilityError> {
    let seed = scenario.seed;
    let idx = index as u64;
    let trace = generate_workload(&mut rng_stream(seed, "workload", &[idx]), &scenario.workload)?;
    let predictor = Predictor::new(scenario.epsilon);
    let mut runs = Vec::with_capacity(trace.jobs.len());
    let mut aborted = 0;
    let mut missed = 0usize;
    let mut overhead_sum = 0.0;
    for job in &trace.jobs {
        let key = [idx, job.id];
        let costs = scenario.costs.draw(&mut rng_stream(seed, "costs", &key))?;
        let horizon = job.arrival + GUARD_FACTOR * job.t_ideal;
        let failures = draw_failures(
            &mut rng_stream(seed, "faults", &key),
            scenario.failure_rate,
            job.arrival,
            horizon,
        );
        let rng = rng_stream(seed, "prediction", &key);
        match execute_job(job, &scenario.policy, &costs, &failures, &predictor, rng) {
            Ok(m) => {
                overhead_sum += m.overhead;
                missed += usize::from(!m.deadline_met);
                runs.push(m);
            }
            Err(ReliabilityError::NonTerminating { .. }) => {
                overhead_sum += GUARD_FACTOR - 1.0;
                missed += 1;
                aborted += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let n = runs.len() + aborted;
    let (overhead, miss) = if n == 0 {
        (0.0, 0.0)
    } else {
        (overhead_sum / n as f64, missed as f64 / n as f64)
    };
    Ok(ReplicaOutcome {
        runs,
        overhead,
        deadline_miss_fraction: miss,
        aborted,
    })
}

/// Runs all replicas in parallel; results keep replica order.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult, ReliabilityError> {
    scenario.policy.validate()?;
    scenario.costs.validate()?;
    let replicas = (0..scenario.replicas)
        .into_par_iter()
        .map(|i| run_replica(scenario, i))
        .collect::<Result<Vec<_>, _>>()?;
    let overheads: Vec<f64> = replicas.iter().map(|r| r.overhead).collect();
    let median_overhead = median(&overheads).unwrap_or(0.0);
    let iqr = match (quantile(&overheads, 0.75), quantile(&overheads, 0.25)) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    Ok(ScenarioResult {
        replicas,
        median_overhead,
        iqr,
    })
}

pub const CALIBRATION_TARGET: f64 = 1.0;
pub const CALIBRATION_TOLERANCE: f64 = 0.05;
pub const MIN_CALIBRATION_RATE: f64 = 1e-8;
pub const MAX_CALIBRATION_RATE: f64 = 1e-1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub rate: f64,
    pub median_overhead: f64,
    pub evaluations: usize,
}

/// Finds the restart-only failure rate whose median slowdown is 1, by
/// bracketing and geometric bisection. `scenario.failure_rate` is ignored.
pub fn calibrate_failure_rate(scenario: &Scenario) -> Result<Calibration, ReliabilityError> {
    if scenario.policy != CheckpointPolicy::RestartOnly {
        return Err(ReliabilityError::CalibrationPolicy);
    }
    let mut evaluations = 0;
    let mut eval = |rate: f64| -> Result<f64, ReliabilityError> {
        evaluations += 1;
        let s = Scenario {
            failure_rate: rate,
            ..scenario.clone()
        };
        Ok(run_scenario(&s)?.median_overhead)
    };
    let target = CALIBRATION_TARGET;
    // bisection stops well inside the acceptance band
    let tight = CALIBRATION_TOLERANCE / 5.0;
    let no_bracket = ReliabilityError::NoBracket {
        lo: MIN_CALIBRATION_RATE,
        hi: MAX_CALIBRATION_RATE,
        target,
    };

    let guess = (1.0 / scenario.workload.mean_t_ideal).clamp(MIN_CALIBRATION_RATE, MAX_CALIBRATION_RATE);
    let mut best = (guess, eval(guess)?);
    let (mut lo, mut hi);
    if best.1 < target {
        lo = best;
        loop {
            if lo.0 >= MAX_CALIBRATION_RATE {
                return Err(no_bracket);
            }
            let r = (lo.0 * 2.0).min(MAX_CALIBRATION_RATE);
            let o = eval(r)?;
            if o >= target {
                hi = (r, o);
                break;
            }
            lo = (r, o);
        }
    } else {
        hi = best;
        loop {
            if hi.0 <= MIN_CALIBRATION_RATE {
                return Err(no_bracket);
            }
            let r = (hi.0 / 2.0).max(MIN_CALIBRATION_RATE);
            let o = eval(r)?;
            if o < target {
                lo = (r, o);
                break;
            }
            hi = (r, o);
        }
    }
    for point in [lo, hi] {
        if (point.1 - target).abs() < (best.1 - target).abs() {
            best = point;
        }
    }
    let mut iterations = 0;
    while (best.1 - target).abs() > tight && iterations < 60 {
        iterations += 1;
        let mid = (lo.0 * hi.0).sqrt();
        let o = eval(mid)?;
        if (o - target).abs() < (best.1 - target).abs() {
            best = (mid, o);
        }
        if o < target {
            lo = (mid, o);
        } else {
            hi = (mid, o);
        }
    }
    Ok(Calibration {
        rate: best.0,
        median_overhead: best.1,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{preset, JobClass};

    fn job(t_ideal: f64) -> Job {
        Job::simple(0, 0.0, t_ideal, preset("batch-nwp").unwrap(), JobClass::Batch).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        rng_stream(0, "prediction", &[])
    }

    fn costs(c: f64, r: f64) -> CostParams {
        CostParams::new(c, r).unwrap()
    }

    #[test]
    fn rate_at_reference_temperature() {
        let m = FaultModel::new(1e4, 330.0, 0.05).unwrap();
        assert_eq!(effective_failure_rate(&m, 330.0), 1e-4);
        let flat = FaultModel::new(1e4, 330.0, 0.0).unwrap();
        assert_eq!(effective_failure_rate(&flat, 400.0), 1e-4);
        let hot = effective_failure_rate(&m, 340.0);
        assert!((hot - 1.6487212707e-4).abs() < 1e-13, "{hot}");
    }

    #[test]
    fn invalid_fault_model() {
        assert!(FaultModel::new(0.0, 300.0, 0.0).is_err());
        assert!(FaultModel::new(1.0, 300.0, -0.1).is_err());
    }

    #[test]
    fn zero_rate_no_failures() {
        assert!(draw_failures(&mut rng(), 0.0, 0.0, 1e9).is_empty());
    }

    #[test]
    fn failure_count_matches_rate() {
        let mean = (0..100u64)
            .map(|s| draw_failures(&mut rng_stream(s, "faults", &[]), 1e-3, 0.0, 1e6).len())
            .sum::<usize>() as f64
            / 100.0;
        assert!((mean - 1000.0).abs() / 1000.0 < 0.05, "{mean}");
    }

    #[test]
    fn failure_gap_mean() {
        let f = draw_failures(&mut rng_stream(4, "faults", &[]), 0.5, 0.0, 40_000.0);
        assert!(f.len() >= 10_000);
        let gaps: Vec<f64> = std::iter::once(f[0])
            .chain(f.windows(2).map(|w| w[1] - w[0]))
            .collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.03, "{mean}");
        assert!(f.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn exact_predictor() {
        let p = Predictor::new(0.0);
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(predict(1234.5, &p, &mut r), 1234.5);
        }
    }

    #[test]
    fn prediction_within_bounds_and_mean_error() {
        let p = Predictor::new(0.05);
        let mut r = rng();
        let mut abs_err = 0.0;
        for _ in 0..10_000 {
            let v = predict(1000.0, &p, &mut r);
            assert!((950.0..=1050.0).contains(&v));
            abs_err += ((v - 1000.0) / 1000.0).abs();
        }
        assert!(abs_err / 10_000.0 <= 0.025 + 0.01);
    }

    #[test]
    fn fixed_rate_interval_is_twenty_checkpoints() {
        let state = ExecState {
            progress: 0.0,
            durable: 0.0,
            mode: Mode::Running { since: 0.0 },
            t_ideal: 100.0,
        };
        let plan = next_checkpoint(&CheckpointPolicy::fixed_rate(), &state, &costs(0.02, 0.2), 0.0, None)
            .unwrap();
        assert!((plan.start - 40.0).abs() < 1e-12);
    }

    #[test]
    fn error_tolerant_fires_at_ninety_percent() {
        let state = ExecState {
            progress: 0.0,
            durable: 0.0,
            mode: Mode::Running { since: 0.0 },
            t_ideal: 10_000.0,
        };
        let pred = Prediction {
            reference: 0.0,
            ttf: 1000.0,
            at: 1000.0,
        };
        let plan = next_checkpoint(
            &CheckpointPolicy::error_tolerant(),
            &state,
            &costs(0.02, 0.2),
            0.0,
            Some(&pred),
        )
        .unwrap();
        assert_eq!(plan.start, 900.0);
        assert!(next_checkpoint(&CheckpointPolicy::RestartOnly, &state, &costs(0.02, 0.2), 0.0, Some(&pred))
            .is_none());
        let exact = CheckpointPolicy::PredictionBased { lead: 0.0 };
        let pb = next_checkpoint(&exact, &state, &costs(0.02, 0.2), 0.0, Some(&pred)).unwrap();
        assert_eq!(pb.done, 1000.0);
        assert!((pb.start - 800.0).abs() < 1e-9);
        let windowed = next_checkpoint(&CheckpointPolicy::prediction_based(), &state, &costs(0.02, 0.2), 0.0, Some(&pred))
            .unwrap();
        assert!((windowed.done - 800.0).abs() < 1e-9);
        assert!((windowed.start - 600.0).abs() < 1e-9);
    }

    #[test]
    fn failure_free_restart_only_has_no_overhead() {
        let m = execute_job(
            &job(100.0),
            &CheckpointPolicy::RestartOnly,
            &costs(0.02, 0.2),
            &[],
            &Predictor::new(0.0),
            rng(),
        )
        .unwrap();
        assert_eq!(m.overhead, 0.0);
        assert_eq!(m.t_exe, 100.0);
        assert_eq!((m.failures, m.checkpoints), (0, 0));
    }

    #[test]
    fn failure_free_fixed_rate_hand_trace() {
        let (m, trace) = execute_job_traced(
            &job(100.0),
            &CheckpointPolicy::fixed_rate(),
            &costs(0.02, 0.2),
            &[],
            &Predictor::new(0.0),
            rng(),
            true,
        )
        .unwrap();
        assert_eq!(m.checkpoints, 2);
        assert!((m.overhead - 0.04).abs() < 1e-12);
        let done: Vec<f64> = trace
            .iter()
            .filter(|e| matches!(e.kind, EventKind::CheckpointDone { .. }))
            .map(|e| e.time.secs())
            .collect();
        // work 40 and 80 become durable at wall 42 and 84
        assert_eq!(done.len(), 2);
        assert!((done[0] - 42.0).abs() < 1e-9 && (done[1] - 84.0).abs() < 1e-9);
    }

    #[test]
    fn exact_prediction_checkpoints_right_before_failure() {
        let (c, r) = (0.02, 0.2);
        let run = |policy| {
            execute_job(&job(100.0), &policy, &costs(c, r), &[50.0], &Predictor::new(0.0), rng()).unwrap()
        };
        let m = run(CheckpointPolicy::PredictionBased { lead: 0.0 });
        assert_eq!(m.failures, 1);
        assert_eq!(m.checkpoints, 1);
        assert!((m.overhead - (c + r)).abs() < 1e-9, "{}", m.overhead);
        // one checkpoint duration of work is given up ahead of the failure
        let m = run(CheckpointPolicy::prediction_based());
        assert_eq!(m.checkpoints, 1);
        assert!((m.overhead - (2.0 * c + r)).abs() < 1e-9, "{}", m.overhead);
    }

    #[test]
    fn restart_only_loses_all_progress() {
        let m = execute_job(
            &job(100.0),
            &CheckpointPolicy::RestartOnly,
            &costs(0.02, 0.2),
            &[50.0],
            &Predictor::new(0.0),
            rng(),
        )
        .unwrap();
        // 50 s lost, 20 s restore, 100 s redo
        assert!((m.t_exe - 170.0).abs() < 1e-9);
    }

    #[test]
    fn failure_during_checkpoint_discards_it() {
        // fixed-rate checkpoint runs 40..42; failure at 41
        let m = execute_job(
            &job(100.0),
            &CheckpointPolicy::fixed_rate(),
            &costs(0.02, 0.2),
            &[41.0],
            &Predictor::new(0.0),
            rng(),
        )
        .unwrap();
        assert_eq!(m.checkpoints_started, 3);
        // restart from zero at 61; checkpoints at 101..103, 143..145; done at 165
        assert!((m.t_exe - 165.0).abs() < 1e-9, "{}", m.t_exe);
        assert_eq!(m.checkpoints, 2);
    }

    #[test]
    fn failure_during_restore_restarts_it() {
        let m = execute_job(
            &job(100.0),
            &CheckpointPolicy::RestartOnly,
            &costs(0.02, 0.2),
            &[10.0, 20.0],
            &Predictor::new(0.0),
            rng(),
        )
        .unwrap();
        // fail at 10, restore 10..30 interrupted at 20, restore 20..40, run 100
        assert!((m.t_exe - 140.0).abs() < 1e-9);
        assert_eq!(m.failures, 2);
    }

    #[test]
    fn guard_aborts_runaway_runs() {
        let failures: Vec<f64> = (1..200_000).map(|i| i as f64 * 0.9).collect();
        let err = execute_job(
            &job(100.0),
            &CheckpointPolicy::RestartOnly,
            &costs(0.02, 0.2),
            &failures,
            &Predictor::new(0.0),
            rng(),
        )
        .unwrap_err();
        assert!(matches!(err, ReliabilityError::NonTerminating { .. }));
    }

    #[test]
    fn cost_params_invariants() {
        assert!(CostParams::new(0.02, 0.01).is_err());
        assert!(CostParams::new(0.0, 0.1).is_err());
        assert!(CostParams::new(0.02, 1.0).is_err());
        assert!(CostParams::new(0.02, 0.0).is_ok());
        let mut r = rng();
        for _ in 0..1000 {
            let c = CostRanges::default().draw(&mut r).unwrap();
            assert!((0.015..=0.02).contains(&c.checkpoint));
            assert!((0.15..=0.2).contains(&c.restore));
        }
        let fine = CostRanges {
            permanent_state_fraction: Some(0.5),
            ..Default::default()
        };
        let c = fine.draw(&mut r).unwrap();
        assert!(c.checkpoint <= 0.01);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [
            CheckpointPolicy::RestartOnly,
            CheckpointPolicy::fixed_rate(),
            CheckpointPolicy::prediction_based(),
            CheckpointPolicy::error_tolerant(),
        ] {
            assert_eq!(p.name().parse::<CheckpointPolicy>().unwrap(), p);
        }
        assert!(CheckpointPolicy::ErrorTolerant { fraction: 1.0 }.validate().is_err());
        assert!(CheckpointPolicy::FixedRate { interval: Some(0.0) }.validate().is_err());
    }

    #[test]
    fn incremental_run_matches_batch_run() {
        let spec = RunSpec {
            job: 0,
            start: 0.0,
            t_ideal: 100.0,
            initial_progress: 0.0,
            policy: CheckpointPolicy::fixed_rate(),
            costs: costs(0.02, 0.2),
            predictor: Predictor::new(0.0),
            traced: false,
        };
        let mut run = JobRun::new(spec.clone(), vec![55.0], rng()).unwrap();
        let projected = run.projected_completion().unwrap();
        run.run_until(60.0).unwrap();
        assert_eq!(run.state().durable, 40.0);
        let m = run.run_to_completion().unwrap();
        assert_eq!(m.t_exe, projected);
        let mut again = JobRun::new(spec, vec![55.0], rng()).unwrap();
        assert_eq!(again.run_to_completion().unwrap(), m);
    }

    #[test]
    fn injected_failure_rolls_back() {
        let spec = RunSpec {
            job: 0,
            start: 0.0,
            t_ideal: 100.0,
            initial_progress: 0.0,
            policy: CheckpointPolicy::fixed_rate(),
            costs: costs(0.02, 0.2),
            predictor: Predictor::new(0.0),
            traced: true,
        };
        let mut run = JobRun::new(spec, vec![], rng()).unwrap();
        run.run_until(50.0).unwrap();
        run.inject_failure(50.0).unwrap();
        let m = run.run_to_completion().unwrap();
        assert_eq!(m.failures, 1);
        // 8 s since durable 40 (at wall 42) lost plus 20 s restore
        assert!((m.t_exe - (104.0 + 8.0 + 20.0)).abs() < 1e-9, "{}", m.t_exe);
        assert!(run.inject_failure(10.0).is_err());
    }
}
