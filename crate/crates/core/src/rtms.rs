//! Two-layer resource management: a global dispatcher choosing a node for
//! each job, and per-node local managers mapping kernels onto devices,
//! admitting jobs against their pWCET and reacting to failures.
//!
//! [`simulate`] wires both layers into one event loop over a cluster.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{rng_stream, Engine, EngineError, Event, EventKind, EventQueue};
use crate::platform::{
    device_power_map, discover, DeviceKind, DeviceStatus, GlobalResourceView, PlatformError, ThermalGrid,
    ThermalParams, Topology,
};
use crate::pwcet::{self, PwcetError, PwcetEstimate};
use crate::reliability::{
    draw_failures, effective_failure_rate, CheckpointPolicy, CostRanges, ExecState, FaultModel, JobRun,
    Predictor, ReliabilityError, RunSpec, GUARD_FACTOR,
};
use crate::stats::median;
use crate::workload::{sample_exec_time, Job, WorkloadError};

/// Per-hop access latency as a fraction of the kernel's base time.
pub const DEFAULT_HOP_LATENCY: f64 = 0.01;
/// Runs drawn to characterize the execution time of a mapping.
pub const PWCET_CHARACTERIZATION_RUNS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RtmsError {
    #[error("job {job}: no node offers a compatible device for every kernel")]
    NoCompatibleNode { job: u64 },
    #[error("job {job}: kernel {kernel} has no compatible device reachable from node {node}")]
    NoCompatibleDevice { job: u64, kernel: u64, node: u64 },
    #[error("job {job}: no pWCET estimate for its mapping")]
    MissingPwcet { job: u64 },
    #[error("job {job}: pWCET estimate is for exceedance {have:e}, job needs {want:e}")]
    ExceedanceMismatch { job: u64, have: f64, want: f64 },
    #[error("device {device} is already held by job {holder}")]
    DeviceBusy { device: u64, holder: u64 },
    #[error("unknown node {0}")]
    UnknownNode(u64),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job accounting does not reconcile: {arrived} arrived, {done} done, {rejected} rejected, {aborted} aborted, {queued} queued")]
    Conservation {
        arrived: usize,
        done: usize,
        rejected: usize,
        aborted: usize,
        queued: usize,
    },
    #[error("invalid simulation setting: {0}")]
    Config(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
    #[error(transparent)]
    Pwcet(#[from] PwcetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Dispatcher state: pending jobs, committed work per node and the failure
/// forecast used for proactive placement.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalManagerState {
    pub pending: VecDeque<u64>,
    /// Seconds of committed, unfinished work per node.
    pub load: BTreeMap<u64, f64>,
    /// Predicted instant of each node's next failure.
    pub forecast: BTreeMap<u64, f64>,
    pub down: BTreeSet<u64>,
    pub assignment: BTreeMap<u64, u64>,
    committed: BTreeMap<u64, f64>,
}

impl GlobalManagerState {
    pub fn new(nodes: impl IntoIterator<Item = u64>) -> Self {
        GlobalManagerState {
            load: nodes.into_iter().map(|n| (n, 0.0)).collect(),
            ..Default::default()
        }
    }

    /// Removes a job's committed work from its node.
    pub fn release(&mut self, job: u64) {
        if let (Some(node), Some(w)) = (self.assignment.remove(&job), self.committed.remove(&job)) {
            if let Some(l) = self.load.get_mut(&node) {
                *l = (*l - w).max(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchParams {
    /// Restore fraction `r` charged to nodes forecast to fail during the job.
    pub restore_fraction: f64,
    pub hop_latency: f64,
    /// Weight of the busy-power term; zero disables it.
    pub power_weight: f64,
}

impl Default for DispatchParams {
    fn default() -> Self {
        DispatchParams {
            restore_fraction: 0.175,
            hop_latency: DEFAULT_HOP_LATENCY,
            power_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeScore {
    pub node: u64,
    pub lower_bound: f64,
    pub score: f64,
}

/// Fastest achievable failure-free time of `job` from `view`, ignoring
/// device availability, with the busy power of the devices involved.
fn lower_bound(job: &Job, view: &GlobalResourceView, hop_latency: f64) -> Option<(f64, f64)> {
    let mut total = 0.0;
    let mut power = 0.0;
    for kernel in &job.kernels {
        let best = view
            .entries
            .iter()
            .filter(|e| e.status != DeviceStatus::Down)
            .filter_map(|e| {
                let imp = kernel.implementation_for(e.device.kind)?;
                let t = imp.base_time / e.device.speed_factor + e.hops as f64 * hop_latency * imp.base_time;
                Some((t, e.device.busy_w))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))?;
        total += best.0;
        power += best.1;
    }
    Some((total, power))
}

/// Scores every live node for `job`; incompatible nodes are left out.
pub fn score_nodes(
    global: &GlobalManagerState,
    job: &Job,
    views: &[GlobalResourceView],
    now: f64,
    params: &DispatchParams,
) -> Vec<NodeScore> {
    let mut out = Vec::new();
    for view in views {
        let node = view.observer;
        if global.down.contains(&node) {
            continue;
        }
        let Some((lb, power)) = lower_bound(job, view, params.hop_latency) else {
            continue;
        };
        let load = global.load.get(&node).copied().unwrap_or(0.0);
        let mut score = load + lb;
        let (start, end) = (now + load, now + load + lb);
        if global.forecast.get(&node).is_some_and(|&f| f >= start && f <= end) {
            score += params.restore_fraction * lb;
        }
        score += params.power_weight * power * lb;
        out.push(NodeScore {
            node,
            lower_bound: lb,
            score,
        });
    }
    out.sort_by_key(|s| s.node);
    out
}

/// Picks the node with the lowest score, the smallest id on ties, and commits
/// the job's lower-bound work to it.
pub fn dispatch(
    global: &mut GlobalManagerState,
    job: &Job,
    views: &[GlobalResourceView],
    now: f64,
    params: &DispatchParams,
) -> Result<NodeScore, RtmsError> {
    let scores = score_nodes(global, job, views, now, params);
    let best = scores
        .into_iter()
        .reduce(|best, s| if s.score < best.score { s } else { best })
        .ok_or(RtmsError::NoCompatibleNode { job: job.id })?;
    *global.load.entry(best.node).or_insert(0.0) += best.lower_bound;
    global.assignment.insert(job.id, best.node);
    global.committed.insert(job.id, best.lower_bound);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelAssignment {
    pub kernel: u64,
    pub kind: DeviceKind,
    pub device: u64,
    pub hops: u32,
    /// Expected execution time on the device, jitter included.
    pub expected_time: f64,
    pub hop_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingDecision {
    pub job: u64,
    pub node: u64,
    pub kernels: Vec<KernelAssignment>,
    pub t_ideal: f64,
    /// Key of the pWCET estimate characterizing this mapping.
    pub pwcet_ref: u64,
}

impl MappingDecision {
    pub fn devices(&self) -> BTreeSet<u64> {
        self.kernels.iter().map(|k| k.device).collect()
    }

    fn summary(&self) -> String {
        self.kernels
            .iter()
            .map(|k| format!("k{}->dev{}({} hops={})", k.kernel, k.device, k.kind, k.hops))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mapping {
    Mapped(MappingDecision),
    /// No free compatible device for some kernel; wait in the FIFO of `class`.
    Queued { class: DeviceKind },
}

/// Maps each kernel to the free device minimizing expected time plus hop
/// penalty. Kernels run one after the other, so one device may take several
/// kernels of the same job.
pub fn map_kernels(job: &Job, view: &GlobalResourceView, hop_latency: f64) -> Result<Mapping, RtmsError> {
    let mut kernels = Vec::with_capacity(job.kernels.len());
    for kernel in &job.kernels {
        let mut best: Option<(f64, KernelAssignment)> = None;
        let mut compatible_class = None;
        for e in view.entries.iter().filter(|e| e.status != DeviceStatus::Down) {
            let Some(imp) = kernel.implementation_for(e.device.kind) else {
                continue;
            };
            compatible_class.get_or_insert(e.device.kind);
            if e.status != DeviceStatus::Free {
                continue;
            }
            let expected = imp.base_time / e.device.speed_factor * (1.0 + imp.jitter.mean());
            let penalty = e.hops as f64 * hop_latency * imp.base_time;
            let cost = expected + penalty;
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((
                    cost,
                    KernelAssignment {
                        kernel: kernel.id,
                        kind: e.device.kind,
                        device: e.device.id,
                        hops: e.hops,
                        expected_time: expected,
                        hop_penalty: penalty,
                    },
                ));
            }
        }
        match (best, compatible_class) {
            (Some((_, a)), _) => kernels.push(a),
            (None, Some(class)) => return Ok(Mapping::Queued { class }),
            (None, None) => {
                return Err(RtmsError::NoCompatibleDevice {
                    job: job.id,
                    kernel: kernel.id,
                    node: view.observer,
                })
            }
        }
    }
    let t_ideal = kernels.iter().map(|k| k.expected_time + k.hop_penalty).sum();
    Ok(Mapping::Mapped(MappingDecision {
        job: job.id,
        node: view.observer,
        kernels,
        t_ideal,
        pwcet_ref: job.id,
    }))
}

/// One failure-free execution time of the mapped job per run: kernel times
/// with jitter plus hop penalties.
pub fn characterize_mapping<R: Rng + ?Sized>(
    job: &Job,
    decision: &MappingDecision,
    topology: &Topology,
    runs: usize,
    rng: &mut R,
) -> Result<Vec<f64>, RtmsError> {
    let mut pairs = Vec::with_capacity(decision.kernels.len());
    for a in &decision.kernels {
        let kernel = job
            .kernels
            .iter()
            .find(|k| k.id == a.kernel)
            .ok_or(RtmsError::UnknownJob(job.id))?;
        let imp = kernel.implementation_for(a.kind).ok_or(RtmsError::NoCompatibleDevice {
            job: job.id,
            kernel: a.kernel,
            node: decision.node,
        })?;
        let device = topology.device(a.device).ok_or(PlatformError::UnknownDevice(a.device))?;
        pairs.push((imp, device, a.hop_penalty));
    }
    let mut out = Vec::with_capacity(runs);
    for _ in 0..runs {
        let mut t = 0.0;
        for (imp, device, penalty) in &pairs {
            t += sample_exec_time(imp, device, rng)? + penalty;
        }
        out.push(t);
    }
    Ok(out)
}

/// pWCET at `p_e`. A jitter-free mapping has a single execution time, which
/// is then its own bound.
pub fn mapping_pwcet(samples: &[f64], p_e: f64) -> Result<PwcetEstimate, RtmsError> {
    let met = pwcet::met(samples)?;
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    if met == min {
        return Ok(PwcetEstimate {
            p_e,
            value: met,
            met,
            relative_increase: 0.0,
        });
    }
    Ok(pwcet::estimate(samples, p_e)?.1)
}

pub type PwcetTable = BTreeMap<u64, PwcetEstimate>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admission {
    Accept { pwcet: f64, budget: f64 },
    Reject { pwcet: f64, budget: f64 },
}

impl Admission {
    pub fn accepted(&self) -> bool {
        matches!(self, Admission::Accept { .. })
    }
}

/// Accepts iff the pWCET at exceedance `1 - p` fits the deadline budget left
/// at `now`, measured from the job's arrival.
pub fn admit(job: &Job, decision: &MappingDecision, table: &PwcetTable, now: f64) -> Result<Admission, RtmsError> {
    let est = table
        .get(&decision.pwcet_ref)
        .ok_or(RtmsError::MissingPwcet { job: job.id })?;
    let want = job.timing.miss_probability();
    if (est.p_e - want).abs() > 1e-9 * want {
        return Err(RtmsError::ExceedanceMismatch {
            job: job.id,
            have: est.p_e,
            want,
        });
    }
    let budget = job.timing.deadline_s - (now - job.arrival).max(0.0);
    Ok(if est.value <= budget {
        Admission::Accept {
            pwcet: est.value,
            budget,
        }
    } else {
        Admission::Reject {
            pwcet: est.value,
            budget,
        }
    })
}

/// Node-level manager: which job holds which device, and who waits.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalManagerState {
    pub node: u64,
    /// Device id to holding job.
    pub allocation: BTreeMap<u64, u64>,
    pub queues: BTreeMap<DeviceKind, VecDeque<u64>>,
    /// Last known execution state of each running job.
    pub active: BTreeMap<u64, ExecState>,
    pub policy: CheckpointPolicy,
}

impl LocalManagerState {
    pub fn new(node: u64, policy: CheckpointPolicy) -> Self {
        LocalManagerState {
            node,
            allocation: BTreeMap::new(),
            queues: BTreeMap::new(),
            active: BTreeMap::new(),
            policy,
        }
    }

    /// Takes every device of `decision` for its job, all or nothing.
    pub fn allocate(&mut self, decision: &MappingDecision) -> Result<(), RtmsError> {
        for d in decision.devices() {
            if let Some(&holder) = self.allocation.get(&d) {
                if holder != decision.job {
                    return Err(RtmsError::DeviceBusy { device: d, holder });
                }
            }
        }
        for d in decision.devices() {
            self.allocation.insert(d, decision.job);
        }
        Ok(())
    }

    /// Frees the job's devices and returns them.
    pub fn release(&mut self, job: u64) -> Vec<u64> {
        let held: Vec<u64> = self
            .allocation
            .iter()
            .filter(|(_, &j)| j == job)
            .map(|(&d, _)| d)
            .collect();
        for d in &held {
            self.allocation.remove(d);
        }
        self.active.remove(&job);
        held
    }

    pub fn enqueue(&mut self, class: DeviceKind, job: u64) {
        self.queues.entry(class).or_default().push_back(job);
    }

    pub fn queued(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureScope {
    /// Transient node failure; the node comes back after the restore.
    Node,
    /// Permanent loss of one device.
    Device(u64),
    /// Permanent loss of the whole node.
    NodeDown,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecoveryAction {
    /// The job does not use the failed resource.
    Unaffected,
    /// Roll back on the same devices.
    Restore,
    /// Roll back and continue on a replica device.
    Remap { from: u64, to: u64 },
    /// Hand the job back to the global manager with this much durable work.
    Requeue { durable: f64 },
}

/// Local reaction to a failure hitting `job`. `view` must already show the
/// failed device or node as down.
pub fn on_failure(
    local: &mut LocalManagerState,
    job: u64,
    scope: FailureScope,
    view: &GlobalResourceView,
) -> RecoveryAction {
    let durable = match local.policy {
        CheckpointPolicy::RestartOnly => 0.0,
        _ => local.active.get(&job).map_or(0.0, |s| s.durable),
    };
    match scope {
        FailureScope::Node => RecoveryAction::Restore,
        FailureScope::NodeDown => {
            local.release(job);
            RecoveryAction::Requeue { durable }
        }
        FailureScope::Device(dev) => {
            if local.allocation.get(&dev) != Some(&job) {
                return RecoveryAction::Unaffected;
            }
            let Some(kind) = view.entry(dev).map(|e| e.device.kind) else {
                return RecoveryAction::Unaffected;
            };
            let replica = view
                .entries
                .iter()
                .filter(|e| e.device.kind == kind && e.status == DeviceStatus::Free)
                .filter(|e| !local.allocation.contains_key(&e.device.id))
                .min_by_key(|e| (e.hops, e.device.id));
            match replica {
                Some(r) => {
                    let to = r.device.id;
                    local.allocation.remove(&dev);
                    local.allocation.insert(to, job);
                    RecoveryAction::Remap { from: dev, to }
                }
                None => {
                    local.release(job);
                    RecoveryAction::Requeue { durable }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Dispatch,
    Map,
    Admit,
    Reject,
    Failover,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Dispatch => "dispatch",
            Decision::Map => "map",
            Decision::Admit => "admit",
            Decision::Reject => "reject",
            Decision::Failover => "failover",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub time: f64,
    pub job: u64,
    pub event: Decision,
    pub node: Option<u64>,
    pub detail: String,
}

pub const DECISION_LOG_HEADER: &str = "time,job_id,event,node,detail";

pub fn write_decision_log<W: Write>(log: &[LogEntry], mut out: W) -> io::Result<()> {
    writeln!(out, "{DECISION_LOG_HEADER}")?;
    for e in log {
        let node = e.node.map(|n| n.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", e.time, e.job, e.event, node, e.detail.replace(',', ";"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedNode {
    pub time: f64,
    pub node: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedDevice {
    pub time: f64,
    pub device: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub topology: Topology,
    pub policy: CheckpointPolicy,
    pub epsilon: f64,
    pub costs: CostRanges,
    /// Transient node failures; `None` disables them.
    pub fault_model: Option<FaultModel>,
    pub thermal: ThermalParams,
    /// Interval between thermal updates; `None` disables them.
    pub thermal_step: Option<f64>,
    pub node_down: Vec<TimedNode>,
    pub device_faults: Vec<TimedDevice>,
    pub dispatch: DispatchParams,
    pub pwcet_runs: usize,
    /// Stop at this instant; `None` runs until every job is resolved.
    pub horizon: Option<f64>,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(topology: Topology, policy: CheckpointPolicy) -> Self {
        SimulationConfig {
            topology,
            policy,
            epsilon: 0.0,
            costs: CostRanges::default(),
            fault_model: None,
            thermal: ThermalParams::default(),
            thermal_step: None,
            node_down: Vec::new(),
            device_faults: Vec::new(),
            dispatch: DispatchParams::default(),
            pwcet_runs: PWCET_CHARACTERIZATION_RUNS,
            horizon: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Done,
    Rejected,
    Aborted,
    /// Pending, waiting for devices or still executing at the horizon.
    Queued,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub job: u64,
    pub status: JobStatus,
    pub node: Option<u64>,
    pub arrival: f64,
    pub start: Option<f64>,
    pub done: Option<f64>,
    pub t_ideal: f64,
    /// From the first execution start to completion.
    pub t_exe: Option<f64>,
    pub overhead: Option<f64>,
    pub failures: u64,
    pub checkpoints: u64,
    pub deadline_met: Option<bool>,
    pub pwcet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub arrived: usize,
    pub done: usize,
    pub rejected: usize,
    pub aborted: usize,
    pub queued: usize,
    /// Completed jobs per second of makespan.
    pub throughput: f64,
    pub makespan: f64,
    pub median_overhead: Option<f64>,
    pub deadline_miss_fraction: f64,
    /// Highest cell temperature seen per node, kelvin.
    pub peak_temp: BTreeMap<u64, f64>,
    /// Fixed transient failure rate per node, 1/s.
    pub failure_rate: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub jobs: Vec<JobRecord>,
    pub log: Vec<LogEntry>,
    pub summary: Summary,
    /// Instants at which devices were held, for double-booking checks:
    /// `(time, device, job)` for every allocation change.
    pub allocations: Vec<(f64, u64, Option<u64>)>,
}

pub const JOB_METRICS_HEADER: &str = "job_id,policy,epsilon,t_ideal_s,t_exe_s,overhead,failures,checkpoints,deadline_met";

/// Completed jobs only, in id order.
pub fn write_job_metrics<W: Write>(
    jobs: &[JobRecord],
    policy: &CheckpointPolicy,
    epsilon: f64,
    mut out: W,
) -> io::Result<()> {
    writeln!(out, "{JOB_METRICS_HEADER}")?;
    for j in jobs.iter().filter(|j| j.status == JobStatus::Done) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            j.job,
            policy.name(),
            epsilon,
            j.t_ideal,
            j.t_exe.unwrap_or(f64::NAN),
            j.overhead.unwrap_or(f64::NAN),
            j.failures,
            j.checkpoints,
            j.deadline_met.unwrap_or(false)
        )?;
    }
    Ok(())
}

/// Node failure instants, drawn lazily from one stream per node.
struct FailureSource {
    rng: ChaCha8Rng,
    rate: f64,
    times: Vec<f64>,
    drawn_to: f64,
}

impl FailureSource {
    fn new(rng: ChaCha8Rng, rate: f64) -> Self {
        FailureSource {
            rng,
            rate,
            times: Vec::new(),
            drawn_to: 0.0,
        }
    }

    /// Fixed-length chunks of about a hundred expected failures, so the
    /// realization does not depend on how far ahead callers look.
    fn extend_to(&mut self, t: f64) {
        if self.rate <= 0.0 {
            return;
        }
        while self.drawn_to < t {
            let end = self.drawn_to + 100.0 / self.rate;
            let more = draw_failures(&mut self.rng, self.rate, self.drawn_to, end);
            self.times.extend(more);
            self.drawn_to = end;
        }
    }

    fn between(&mut self, start: f64, end: f64) -> Vec<f64> {
        self.extend_to(end);
        let lo = self.times.partition_point(|&f| f <= start);
        let hi = self.times.partition_point(|&f| f <= end);
        self.times[lo..hi].to_vec()
    }

    fn next_after(&mut self, t: f64) -> Option<f64> {
        if self.rate <= 0.0 {
            return None;
        }
        loop {
            let i = self.times.partition_point(|&f| f <= t);
            if let Some(&f) = self.times.get(i) {
                return Some(f);
            }
            let to = self.drawn_to.max(t) + 1.0 / self.rate;
            self.extend_to(to);
        }
    }
}

struct Active {
    run: JobRun,
    decision: MappingDecision,
    done_seq: u64,
    t_ideal: f64,
}

struct Book {
    job: Job,
    status: JobStatus,
    node: Option<u64>,
    first_start: Option<f64>,
    done: Option<f64>,
    /// Durable work carried over from earlier attempts, in seconds of
    /// `carried_t_ideal`.
    carried: f64,
    carried_t_ideal: f64,
    attempts: u64,
    failures: u64,
    checkpoints: u64,
    t_ideal: f64,
    pwcet: Option<f64>,
}

struct Sim<'a> {
    cfg: &'a SimulationConfig,
    views: Vec<GlobalResourceView>,
    global: GlobalManagerState,
    locals: BTreeMap<u64, LocalManagerState>,
    book: BTreeMap<u64, Book>,
    active: BTreeMap<u64, Active>,
    faults: BTreeMap<u64, FailureSource>,
    grids: BTreeMap<u64, ThermalGrid>,
    peak: BTreeMap<u64, f64>,
    pwcet_table: PwcetTable,
    log: Vec<LogEntry>,
    allocations: Vec<(f64, u64, Option<u64>)>,
    predictor: Predictor,
    /// Arrivals and injected faults not yet processed.
    external: usize,
}

impl Sim<'_> {
    fn log(&mut self, time: f64, job: u64, event: Decision, node: Option<u64>, detail: String) {
        self.log.push(LogEntry {
            time,
            job,
            event,
            node,
            detail,
        });
    }

    fn set_status(&mut self, device: u64, status: DeviceStatus) {
        for v in &mut self.views {
            if let Some(e) = v.entry_mut(device) {
                // a dead device stays dead
                if e.status != DeviceStatus::Down {
                    e.status = status;
                }
            }
        }
    }

    fn view(&self, node: u64) -> &GlobalResourceView {
        self.views
            .iter()
            .find(|v| v.observer == node)
            .expect("every node has a view")
    }

    fn refresh_forecast(&mut self, now: f64, key: u64) {
        for (&node, src) in &mut self.faults {
            match src.next_after(now) {
                Some(true_at) => {
                    let mut rng = rng_stream(self.cfg.seed, "forecast", &[node, key]);
                    let err = self.predictor.draw_error(&mut rng);
                    self.global.forecast.insert(node, true_at + err * (true_at - now));
                }
                None => {
                    self.global.forecast.remove(&node);
                }
            }
        }
    }

    fn dispatch_pending(&mut self, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        while let Some(id) = self.global.pending.pop_front() {
            let job = self.book[&id].job.clone();
            self.refresh_forecast(now, id);
            match dispatch(&mut self.global, &job, &self.views, now, &self.cfg.dispatch) {
                Ok(s) => {
                    self.book.get_mut(&id).expect("booked").node = Some(s.node);
                    self.log(now, id, Decision::Dispatch, Some(s.node), format!("score={:.6} lb={:.6}", s.score, s.lower_bound));
                    self.try_start(id, now, q)?;
                }
                Err(RtmsError::NoCompatibleNode { .. }) => {
                    self.book.get_mut(&id).expect("booked").status = JobStatus::Rejected;
                    self.log(now, id, Decision::Reject, None, "no compatible live node".into());
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Maps, admits and starts a dispatched job, or queues it locally.
    /// Returns whether the job left the local queue.
    fn try_start(&mut self, id: u64, now: f64, q: &mut EventQueue) -> Result<bool, RtmsError> {
        let node = self.book[&id].node.expect("dispatched");
        let job = self.book[&id].job.clone();
        let mapping = match map_kernels(&job, self.view(node), self.cfg.dispatch.hop_latency) {
            Err(RtmsError::NoCompatibleDevice { .. }) => {
                // every compatible device went down while the job waited
                self.log(now, id, Decision::Failover, Some(node), "no live compatible device; redispatch".into());
                self.book.get_mut(&id).expect("booked").node = None;
                self.global.release(id);
                self.global.pending.push_back(id);
                return Ok(true);
            }
            other => other?,
        };
        let decision = match mapping {
            Mapping::Queued { class } => {
                let local = self.locals.get_mut(&node).expect("local manager");
                if !local.queues.get(&class).is_some_and(|qu| qu.contains(&id)) {
                    local.enqueue(class, id);
                }
                return Ok(false);
            }
            Mapping::Mapped(d) => d,
        };
        self.log(now, id, Decision::Map, Some(node), decision.summary());

        let p_e = job.timing.miss_probability();
        let attempt = self.book[&id].attempts;
        let mut rng = rng_stream(self.cfg.seed, "pwcet", &[id, attempt]);
        let samples = characterize_mapping(&job, &decision, &self.cfg.topology, self.cfg.pwcet_runs, &mut rng)?;
        self.pwcet_table.insert(decision.pwcet_ref, mapping_pwcet(&samples, p_e)?);
        let verdict = admit(&job, &decision, &self.pwcet_table, now)?;
        let (pwcet, budget) = match verdict {
            Admission::Accept { pwcet, budget } | Admission::Reject { pwcet, budget } => (pwcet, budget),
        };
        self.book.get_mut(&id).expect("booked").pwcet = Some(pwcet);
        if !verdict.accepted() {
            self.log(now, id, Decision::Reject, Some(node), format!("pwcet={pwcet:.6} budget={budget:.6}"));
            self.book.get_mut(&id).expect("booked").status = JobStatus::Rejected;
            self.global.release(id);
            return Ok(true);
        }
        self.log(now, id, Decision::Admit, Some(node), format!("pwcet={pwcet:.6} budget={budget:.6}"));

        self.locals.get_mut(&node).expect("local manager").allocate(&decision)?;
        for d in decision.devices() {
            self.set_status(d, DeviceStatus::Busy);
            self.allocations.push((now, d, Some(id)));
        }

        // failure-free time of this run: one jitter draw per kernel
        let mut exec_rng = rng_stream(self.cfg.seed, "exec", &[id, attempt]);
        let fresh = characterize_mapping(&job, &decision, &self.cfg.topology, 1, &mut exec_rng)?[0];
        let b = self.book.get_mut(&id).expect("booked");
        let f = if b.carried_t_ideal > 0.0 {
            (b.carried / b.carried_t_ideal).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let t_ideal = f * b.carried_t_ideal + (1.0 - f) * fresh;
        let progress = f * b.carried_t_ideal;
        b.first_start.get_or_insert(now);
        b.t_ideal = t_ideal;
        b.attempts += 1;

        let costs = self.cfg.costs.draw(&mut rng_stream(self.cfg.seed, "costs", &[id]))?;
        let failures = match self.faults.get_mut(&node) {
            Some(src) => src.between(now, now + GUARD_FACTOR * t_ideal),
            None => Vec::new(),
        };
        let spec = RunSpec {
            job: id,
            start: now,
            t_ideal,
            initial_progress: progress,
            policy: self.cfg.policy,
            costs,
            predictor: self.predictor,
            traced: false,
        };
        let run = JobRun::new(spec, failures, rng_stream(self.cfg.seed, "prediction", &[id, attempt]))?;
        let local = self.locals.get_mut(&node).expect("local manager");
        local.active.insert(id, *run.state());
        let mut active = Active {
            run,
            decision,
            done_seq: 0,
            t_ideal,
        };
        match active.run.projected_completion() {
            Ok(t) => {
                active.done_seq = q.schedule(t, EventKind::JobDone { job: id })?;
                self.active.insert(id, active);
            }
            Err(ReliabilityError::NonTerminating { .. }) => {
                self.active.insert(id, active);
                self.abort(id, now);
            }
            Err(e) => return Err(e.into()),
        }
        Ok(true)
    }

    fn release_devices(&mut self, id: u64, node: u64, now: f64) {
        let held = self.locals.get_mut(&node).expect("local manager").release(id);
        for d in held {
            self.set_status(d, DeviceStatus::Free);
            self.allocations.push((now, d, None));
        }
    }

    fn abort(&mut self, id: u64, now: f64) {
        let node = self.book[&id].node.expect("dispatched");
        let b = self.book.get_mut(&id).expect("booked");
        if let Some(a) = self.active.remove(&id) {
            b.failures += a.run.failures();
            b.checkpoints += a.run.checkpoints();
        }
        b.status = JobStatus::Aborted;
        self.release_devices(id, node, now);
        self.global.release(id);
    }

    /// Starts locally queued jobs, FIFO per device class, until every head
    /// blocks.
    fn drain_local_queues(&mut self, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        let nodes: Vec<u64> = self.locals.keys().copied().collect();
        for node in nodes {
            let classes: Vec<DeviceKind> = self.locals[&node].queues.keys().copied().collect();
            for class in classes {
                while let Some(&head) = self.locals[&node].queues.get(&class).and_then(|qu| qu.front()) {
                    self.locals
                        .get_mut(&node)
                        .expect("local manager")
                        .queues
                        .get_mut(&class)
                        .expect("queue")
                        .pop_front();
                    if !self.try_start(head, now, q)? {
                        // re-queued by try_start; restore its place at the head
                        let local = self.locals.get_mut(&node).expect("local manager");
                        for qu in local.queues.values_mut() {
                            qu.retain(|&j| j != head);
                        }
                        local.queues.entry(class).or_default().push_front(head);
                        break;
                    }
                }
            }
        }
        if self.global.pending.is_empty() {
            Ok(())
        } else {
            self.dispatch_pending(now, q)
        }
    }

    fn finish(&mut self, id: u64, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        let Some(a) = self.active.get_mut(&id) else {
            return Ok(());
        };
        let outcome = a.run.run_until(now);
        if let Err(ReliabilityError::NonTerminating { .. }) = outcome {
            self.abort(id, now);
            return self.drain_local_queues(now, q);
        }
        outcome?;
        if !a.run.is_done() {
            let t = a.run.projected_completion()?;
            a.done_seq = q.schedule(t.max(now), EventKind::JobDone { job: id })?;
            return Ok(());
        }
        let a = self.active.remove(&id).expect("active");
        let node = self.book[&id].node.expect("dispatched");
        let b = self.book.get_mut(&id).expect("booked");
        b.status = JobStatus::Done;
        b.done = a.run.done_at();
        b.failures += a.run.failures();
        b.checkpoints += a.run.checkpoints();
        self.release_devices(id, node, now);
        self.global.release(id);
        self.drain_local_queues(now, q)
    }

    /// Brings a running job up to `now` and hands it back to the global queue.
    fn requeue(&mut self, id: u64, durable: f64, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        let a = self.active.remove(&id).expect("active");
        q.cancel(a.done_seq);
        let node = self.book[&id].node.expect("dispatched");
        let b = self.book.get_mut(&id).expect("booked");
        b.failures += a.run.failures();
        b.checkpoints += a.run.checkpoints();
        b.carried = durable;
        b.carried_t_ideal = a.t_ideal;
        b.node = None;
        self.release_devices(id, node, now);
        self.global.release(id);
        self.global.pending.push_back(id);
        Ok(())
    }

    fn node_down(&mut self, node: u64, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        if !self.locals.contains_key(&node) {
            return Err(RtmsError::UnknownNode(node));
        }
        self.global.down.insert(node);
        self.faults.remove(&node);
        self.global.forecast.remove(&node);
        let devices: Vec<u64> = self.view(node).entries.iter().filter(|e| e.device.node == node).map(|e| e.device.id).collect();
        for &d in &devices {
            self.set_status(d, DeviceStatus::Down);
        }
        // jobs placed on the node go back to the global manager
        let placed: Vec<u64> = self
            .active
            .keys()
            .copied()
            .filter(|id| self.book[id].node == Some(node))
            .collect();
        for id in placed {
            self.advance(id, now)?;
            let local = self.locals.get_mut(&node).expect("local manager");
            let view = self.views.iter().find(|v| v.observer == node).expect("view");
            if let RecoveryAction::Requeue { durable: d } = on_failure(local, id, FailureScope::NodeDown, view) {
                self.log(now, id, Decision::Failover, Some(node), format!("node {node} down; requeue durable={d:.6}"));
                self.requeue(id, d, now, q)?;
            }
        }
        // waiting jobs too
        let local = self.locals.get_mut(&node).expect("local manager");
        let waiting: Vec<u64> = local.queues.values_mut().flat_map(|qu| qu.drain(..)).collect();
        for id in waiting {
            self.log(now, id, Decision::Failover, Some(node), format!("node {node} down; requeue waiting job"));
            let b = self.book.get_mut(&id).expect("booked");
            b.node = None;
            self.global.release(id);
            self.global.pending.push_back(id);
        }
        // remote users of the node's devices lose a device each
        for d in devices {
            self.device_fault(d, now, q)?;
        }
        self.dispatch_pending(now, q)?;
        self.drain_local_queues(now, q)
    }

    fn device_fault(&mut self, device: u64, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        self.set_status(device, DeviceStatus::Down);
        let holder = self
            .locals
            .values()
            .find_map(|l| l.allocation.get(&device).map(|&j| (l.node, j)));
        let Some((node, id)) = holder else {
            return Ok(());
        };
        self.advance(id, now)?;
        let local = self.locals.get_mut(&node).expect("local manager");
        let view = self.views.iter().find(|v| v.observer == node).expect("view");
        match on_failure(local, id, FailureScope::Device(device), view) {
            RecoveryAction::Remap { from, to } => {
                self.set_status(to, DeviceStatus::Busy);
                self.allocations.push((now, from, None));
                self.allocations.push((now, to, Some(id)));
                self.log(now, id, Decision::Failover, Some(node), format!("device {from} lost; remap to {to}"));
                let a = self.active.get_mut(&id).expect("active");
                for k in &mut a.decision.kernels {
                    if k.device == from {
                        k.device = to;
                    }
                }
                a.run.inject_failure(now)?;
                q.cancel(a.done_seq);
                let projected = a.run.projected_completion();
                match projected {
                    Ok(t) => {
                        let seq = q.schedule(t, EventKind::JobDone { job: id })?;
                        self.active.get_mut(&id).expect("active").done_seq = seq;
                    }
                    Err(ReliabilityError::NonTerminating { .. }) => self.abort(id, now),
                    Err(e) => return Err(e.into()),
                }
            }
            RecoveryAction::Requeue { durable } => {
                self.allocations.push((now, device, None));
                self.log(now, id, Decision::Failover, Some(node), format!("device {device} lost; no replica; requeue durable={durable:.6}"));
                self.requeue(id, durable, now, q)?;
                self.dispatch_pending(now, q)?;
            }
            RecoveryAction::Unaffected | RecoveryAction::Restore => {}
        }
        Ok(())
    }

    /// Runs the job's automaton up to `now` and records its state locally;
    /// returns its durable progress.
    fn advance(&mut self, id: u64, now: f64) -> Result<f64, RtmsError> {
        let a = self.active.get_mut(&id).expect("active");
        a.run.run_until(now)?;
        let state = *a.run.state();
        let node = self.book[&id].node.expect("dispatched");
        self.locals.get_mut(&node).expect("local manager").active.insert(id, state);
        Ok(state.durable)
    }

    fn temp_step(&mut self, node: u64, now: f64, q: &mut EventQueue) -> Result<(), RtmsError> {
        let Some(step) = self.cfg.thermal_step else {
            return Ok(());
        };
        if self.global.down.contains(&node) {
            return Ok(());
        }
        let view = self.view(node);
        let devices: Vec<_> = view
            .entries
            .iter()
            .filter(|e| e.device.node == node)
            .map(|e| (e.device.clone(), e.status == DeviceStatus::Busy))
            .collect();
        let (map, _) = device_power_map(devices.iter().map(|(d, b)| (d, *b)));
        let grid = self.grids.get_mut(&node).expect("grid");
        grid.set_power_map(&map)?;
        let bound = grid.stability_bound();
        let n = (step / (0.5 * bound)).ceil().max(1.0);
        for _ in 0..n as usize {
            grid.step_temp(step / n)?;
        }
        let peak = self.peak.entry(node).or_insert(f64::NEG_INFINITY);
        *peak = peak.max(grid.max_temp());
        if self.external > 0 || !self.active.is_empty() || self.locals.values().any(|l| l.queued() > 0) {
            q.schedule(now + step, EventKind::TempStep { node })?;
        }
        Ok(())
    }
}

/// Runs `jobs` over the cluster: global dispatch, local mapping and
/// admission, and checkpointed execution under the configured policy.
///
/// Each node has a fixed transient failure rate from its steady-state
/// temperature with every device busy. Listed node-down and device faults are
/// permanent.
pub fn simulate(cfg: &SimulationConfig, jobs: &[Job]) -> Result<SimulationResult, RtmsError> {
    cfg.policy.validate()?;
    cfg.costs.validate()?;
    if !(cfg.epsilon >= 0.0 && cfg.epsilon < 1.0) {
        return Err(RtmsError::Config(format!("epsilon {} outside [0,1)", cfg.epsilon)));
    }
    if cfg.pwcet_runs < pwcet::MIN_FIT_SAMPLES {
        return Err(RtmsError::Config(format!(
            "pwcet_runs {} below {}",
            cfg.pwcet_runs,
            pwcet::MIN_FIT_SAMPLES
        )));
    }
    if cfg.thermal_step.is_some_and(|s| !(s > 0.0)) {
        return Err(RtmsError::Config("thermal_step must be positive".into()));
    }
    let mut ids = BTreeSet::new();
    if let Some(j) = jobs.iter().find(|j| !ids.insert(j.id)) {
        return Err(RtmsError::Config(format!("duplicate job id {}", j.id)));
    }

    let topo = &cfg.topology;
    let node_ids: Vec<u64> = topo.nodes().iter().map(|n| n.id).collect();
    let mut grids = BTreeMap::new();
    let mut faults = BTreeMap::new();
    let mut rates = BTreeMap::new();
    let mut peak = BTreeMap::new();
    for node in topo.nodes() {
        let mut grid = ThermalGrid::new(cfg.thermal)?;
        let (full, _) = device_power_map(node.devices.iter().map(|d| (d, true)));
        grid.set_power_map(&full)?;
        let hot = grid.steady_state_temp().into_iter().fold(f64::NEG_INFINITY, f64::max);
        let rate = cfg.fault_model.map_or(0.0, |m| effective_failure_rate(&m, hot));
        rates.insert(node.id, rate);
        faults.insert(node.id, FailureSource::new(rng_stream(cfg.seed, "faults", &[node.id]), rate));
        let (idle, _) = device_power_map(node.devices.iter().map(|d| (d, false)));
        grid.set_power_map(&idle)?;
        let start = grid.steady_state_temp();
        grid.set_temperatures(start);
        peak.insert(node.id, grid.max_temp());
        grids.insert(node.id, grid);
    }

    let mut sim = Sim {
        cfg,
        views: discover(topo),
        global: GlobalManagerState::new(node_ids.iter().copied()),
        locals: node_ids
            .iter()
            .map(|&n| (n, LocalManagerState::new(n, cfg.policy)))
            .collect(),
        book: BTreeMap::new(),
        active: BTreeMap::new(),
        faults,
        grids,
        peak,
        pwcet_table: PwcetTable::new(),
        log: Vec::new(),
        allocations: Vec::new(),
        predictor: Predictor::new(cfg.epsilon),
        external: jobs.len() + cfg.node_down.len() + cfg.device_faults.len(),
    };

    let mut engine = Engine::untraced();
    for job in jobs {
        engine.schedule(job.arrival, EventKind::JobArrival { job: job.id })?;
        sim.book.insert(
            job.id,
            Book {
                job: job.clone(),
                status: JobStatus::Queued,
                node: None,
                first_start: None,
                done: None,
                carried: 0.0,
                carried_t_ideal: 0.0,
                attempts: 0,
                failures: 0,
                checkpoints: 0,
                t_ideal: job.t_ideal,
                pwcet: None,
            },
        );
    }
    for nd in &cfg.node_down {
        engine.schedule(
            nd.time,
            EventKind::Failure {
                node: nd.node,
                device: None,
                job: None,
            },
        )?;
    }
    for df in &cfg.device_faults {
        let node = topo
            .device(df.device)
            .ok_or(PlatformError::UnknownDevice(df.device))?
            .node;
        engine.schedule(
            df.time,
            EventKind::Failure {
                node,
                device: Some(df.device),
                job: None,
            },
        )?;
    }
    if let Some(step) = cfg.thermal_step {
        for &n in &node_ids {
            engine.schedule(step, EventKind::TempStep { node: n })?;
        }
    }

    let horizon = cfg.horizon.unwrap_or(f64::INFINITY);
    engine.run_until(horizon, |ev: &Event, q: &mut EventQueue| -> Result<(), RtmsError> {
        let now = ev.time.secs();
        if matches!(ev.kind, EventKind::JobArrival { .. } | EventKind::Failure { .. }) {
            sim.external -= 1;
        }
        match ev.kind {
            EventKind::JobArrival { job } => {
                sim.global.pending.push_back(job);
                sim.dispatch_pending(now, q)
            }
            EventKind::JobDone { job } => {
                if sim.active.get(&job).is_some_and(|a| a.done_seq == ev.seq) {
                    sim.finish(job, now, q)?;
                }
                Ok(())
            }
            EventKind::Failure { node, device: None, .. } => sim.node_down(node, now, q),
            EventKind::Failure { device: Some(d), .. } => {
                sim.device_fault(d, now, q)?;
                sim.drain_local_queues(now, q)
            }
            EventKind::TempStep { node } => sim.temp_step(node, now, q),
            _ => Ok(()),
        }
    })?;

    let mut records = Vec::with_capacity(sim.book.len());
    for (&id, b) in &sim.book {
        let (t_exe, overhead, met) = match (b.status, b.first_start, b.done) {
            (JobStatus::Done, Some(s), Some(d)) => {
                let t_exe = d - s;
                (
                    Some(t_exe),
                    Some(((t_exe - b.t_ideal) / b.t_ideal).max(0.0)),
                    Some(d - b.job.arrival <= b.job.timing.deadline_s),
                )
            }
            _ => (None, None, None),
        };
        let mut failures = b.failures;
        let mut checkpoints = b.checkpoints;
        if let Some(a) = sim.active.get(&id) {
            failures += a.run.failures();
            checkpoints += a.run.checkpoints();
        }
        records.push(JobRecord {
            job: id,
            status: b.status,
            node: b.node,
            arrival: b.job.arrival,
            start: b.first_start,
            done: b.done,
            t_ideal: b.t_ideal,
            t_exe,
            overhead,
            failures,
            checkpoints,
            deadline_met: met,
            pwcet: b.pwcet,
        });
    }

    let count = |s: JobStatus| records.iter().filter(|r| r.status == s).count();
    let (done, rejected, aborted) = (
        count(JobStatus::Done),
        count(JobStatus::Rejected),
        count(JobStatus::Aborted),
    );
    let arrived = jobs.iter().filter(|j| j.arrival <= horizon).count();
    // jobs still in the system, counted from the managers' own structures
    let queued = sim.global.pending.len()
        + sim.locals.values().map(LocalManagerState::queued).sum::<usize>()
        + sim.active.len();
    if done + rejected + aborted + queued != arrived || count(JobStatus::Queued) != queued + (jobs.len() - arrived) {
        return Err(RtmsError::Conservation {
            arrived,
            done,
            rejected,
            aborted,
            queued,
        });
    }
    let overheads: Vec<f64> = records.iter().filter_map(|r| r.overhead).collect();
    let finished: Vec<&JobRecord> = records.iter().filter(|r| r.status == JobStatus::Done).collect();
    let missed = finished.iter().filter(|r| r.deadline_met == Some(false)).count();
    let first_arrival = jobs.iter().map(|j| j.arrival).fold(f64::INFINITY, f64::min);
    let last_done = finished.iter().filter_map(|r| r.done).fold(f64::NEG_INFINITY, f64::max);
    let makespan = if finished.is_empty() { 0.0 } else { last_done - first_arrival };
    let summary = Summary {
        arrived,
        done,
        rejected,
        aborted,
        queued,
        throughput: if makespan > 0.0 { done as f64 / makespan } else { 0.0 },
        makespan,
        median_overhead: median(&overheads),
        deadline_miss_fraction: if finished.is_empty() {
            0.0
        } else {
            missed as f64 / finished.len() as f64
        },
        peak_temp: sim.peak.clone(),
        failure_rate: rates,
    };
    Ok(SimulationResult {
        jobs: records,
        log: sim.log,
        summary,
        allocations: sim.allocations,
    })
}

/// True when no device is ever held by two jobs at once, replaying the
/// allocation changes in order.
pub fn no_double_booking(allocations: &[(f64, u64, Option<u64>)]) -> bool {
    let mut holder: BTreeMap<u64, u64> = BTreeMap::new();
    for &(_, device, job) in allocations {
        match job {
            Some(j) => {
                if holder.get(&device).is_some_and(|&h| h != j) {
                    return false;
                }
                holder.insert(device, j);
            }
            None => {
                holder.remove(&device);
            }
        }
    }
    true
}
