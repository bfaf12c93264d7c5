//! Experiment configuration: JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use hrms_core::platform::{Device, DeviceKind, Node, ThermalParams, Topology};
use hrms_core::reliability::{CheckpointPolicy, CostRanges};
use hrms_core::rtms::{TimedDevice, TimedNode, DEFAULT_HOP_LATENCY, PWCET_CHARACTERIZATION_RUNS};
use hrms_core::workload::WorkloadParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_EPSILON_GRID: [f64; 6] = [0.0, 0.005, 0.01, 0.025, 0.05, 0.1];

/// A policy given by name (`"fixed-rate"`) or as a full object
/// (`{"policy": "error-tolerant", "fraction": 0.8}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Name(String),
    Full(CheckpointPolicy),
}

impl PolicySpec {
    pub fn resolve(&self) -> Result<CheckpointPolicy, String> {
        let p = match self {
            PolicySpec::Name(n) => n.parse::<CheckpointPolicy>().map_err(|e| e.to_string())?,
            PolicySpec::Full(p) => *p,
        };
        p.validate().map_err(|e| e.to_string())?;
        Ok(p)
    }
}

/// Thermal acceleration of the transient failure rate in `simulate`: the
/// base rate applies at `t_ref` kelvin (the ambient temperature when unset)
/// and scales as `exp(beta (T - t_ref))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultModelConfig {
    pub t_ref: Option<f64>,
    pub beta: f64,
}

impl Default for FaultModelConfig {
    fn default() -> Self {
        FaultModelConfig {
            t_ref: None,
            // doubling every 10 K
            beta: std::f64::consts::LN_2 / 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub policy: PolicySpec,
    pub epsilon: f64,
    pub node_down: Vec<TimedNode>,
    pub device_faults: Vec<TimedDevice>,
    pub thermal: ThermalParams,
    pub thermal_step: Option<f64>,
    pub horizon: Option<f64>,
    pub pwcet_runs: usize,
    pub hop_latency: f64,
    pub power_weight: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            policy: PolicySpec::Name("prediction-based".into()),
            epsilon: 0.0,
            node_down: Vec::new(),
            device_faults: Vec::new(),
            thermal: ThermalParams::default(),
            thermal_step: None,
            horizon: None,
            pwcet_runs: PWCET_CHARACTERIZATION_RUNS,
            hop_latency: DEFAULT_HOP_LATENCY,
            power_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Topology JSON, relative to the config file. Built-in two-node cluster
    /// when absent.
    pub topology: Option<PathBuf>,
    pub workload: WorkloadParams,
    pub policies: Vec<PolicySpec>,
    pub epsilon_grid: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    pub costs: CostRanges,
    pub fault_model: FaultModelConfig,
    /// Failure rate for the sweep, 1/s. Read from `calibration.csv` in the
    /// output directory when absent.
    pub failure_rate: Option<f64>,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            topology: None,
            workload: WorkloadParams::default(),
            policies: ["fixed-rate", "prediction-based", "error-tolerant"]
                .iter()
                .map(|s| PolicySpec::Name(s.to_string()))
                .collect(),
            epsilon_grid: DEFAULT_EPSILON_GRID.to_vec(),
            replicas: 20,
            seed: 1,
            costs: CostRanges::default(),
            fault_model: FaultModelConfig::default(),
            failure_rate: None,
            out: PathBuf::from("out"),
            simulate: SimulateConfig::default(),
        }
    }
}

/// Two nodes one hop apart, each with a CPU and a GPU.
pub fn default_topology() -> Topology {
    let node = |id: u64| Node {
        id,
        devices: vec![
            Device::new(10 * id + 1, DeviceKind::Cpu, id, 1.0).with_power(20.0, 95.0),
            Device::new(10 * id + 2, DeviceKind::Gpu, id, 1.0).with_power(30.0, 90.0),
        ],
    };
    Topology::new(vec![node(0), node(1)], vec![vec![0, 1], vec![1, 0]]).expect("built-in topology is valid")
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub replicas: Option<usize>,
    pub epsilon_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub topology: Topology,
    pub policies: Vec<CheckpointPolicy>,
    pub sim_policy: CheckpointPolicy,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("config: {e}")]))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(r) = o.replicas {
            self.replicas = r;
        }
        if let Some(g) = &o.epsilon_grid {
            self.epsilon_grid = g.clone();
        }
    }

    /// Checks every field and resolves the topology; all problems are
    /// reported together.
    pub fn validate(self, base_dir: &Path) -> Result<Loaded, CliError> {
        let mut errors = Vec::new();
        if self.replicas < 1 {
            errors.push("replicas: must be at least 1".to_string());
        }
        if self.epsilon_grid.is_empty() {
            errors.push("epsilon_grid: must not be empty".to_string());
        }
        for (i, e) in self.epsilon_grid.iter().enumerate() {
            if !(0.0..1.0).contains(e) {
                errors.push(format!("epsilon_grid[{i}]: {e} is outside [0, 1)"));
            }
        }
        if self.epsilon_grid.windows(2).any(|w| !(w[0] < w[1])) {
            errors.push("epsilon_grid: must be sorted ascending without duplicates".to_string());
        }
        let mut policies = Vec::new();
        if self.policies.is_empty() {
            errors.push("policies: must not be empty".to_string());
        }
        for (i, p) in self.policies.iter().enumerate() {
            match p.resolve() {
                Ok(p) if policies.iter().any(|q: &CheckpointPolicy| q.name() == p.name()) => errors.push(format!("policies[{i}]: duplicate {}", p.name())),
                Ok(p) => policies.push(p),
                Err(e) => errors.push(format!("policies[{i}]: {e}")),
            }
        }
        if let Err(e) = self.workload.validate() {
            errors.push(format!("workload: {e}"));
        }
        if let Err(e) = self.costs.validate() {
            errors.push(format!("costs: {e}"));
        }
        if let Some(r) = self.failure_rate {
            if !(r > 0.0 && r.is_finite()) {
                errors.push(format!("failure_rate: {r} must be positive"));
            }
        }
        if !(self.fault_model.beta >= 0.0) {
            errors.push("fault_model.beta: must be non-negative".to_string());
        }
        if self.fault_model.t_ref.is_some_and(|t| !t.is_finite()) {
            errors.push("fault_model.t_ref: must be finite".to_string());
        }
        let s = &self.simulate;
        let sim_policy = match s.policy.resolve() {
            Ok(p) => Some(p),
            Err(e) => {
                errors.push(format!("simulate.policy: {e}"));
                None
            }
        };
        if !(0.0..1.0).contains(&s.epsilon) {
            errors.push(format!("simulate.epsilon: {} is outside [0, 1)", s.epsilon));
        }
        if s.pwcet_runs < hrms_core::pwcet::MIN_FIT_SAMPLES {
            errors.push(format!(
                "simulate.pwcet_runs: {} is below {}",
                s.pwcet_runs,
                hrms_core::pwcet::MIN_FIT_SAMPLES
            ));
        }
        if s.thermal_step.is_some_and(|t| !(t > 0.0)) {
            errors.push("simulate.thermal_step: must be positive".to_string());
        }
        if s.horizon.is_some_and(|t| !(t > 0.0)) {
            errors.push("simulate.horizon: must be positive".to_string());
        }
        if !(s.hop_latency >= 0.0) {
            errors.push("simulate.hop_latency: must be non-negative".to_string());
        }
        if !(s.power_weight >= 0.0) {
            errors.push("simulate.power_weight: must be non-negative".to_string());
        }
        for (i, d) in s.node_down.iter().enumerate() {
            if !(d.time >= 0.0) {
                errors.push(format!("simulate.node_down[{i}].time: must be non-negative"));
            }
        }
        for (i, d) in s.device_faults.iter().enumerate() {
            if !(d.time >= 0.0) {
                errors.push(format!("simulate.device_faults[{i}].time: must be non-negative"));
            }
        }
        let topology = match &self.topology {
            None => Some(default_topology()),
            Some(p) => {
                let path = base_dir.join(p);
                match fs::read_to_string(&path) {
                    Ok(text) => match Topology::from_json(&text) {
                        Ok(t) => Some(t),
                        Err(e) => {
                            errors.push(format!("topology: {}: {e}", path.display()));
                            None
                        }
                    },
                    Err(e) => {
                        errors.push(format!("topology: {}: {e}", path.display()));
                        None
                    }
                }
            }
        };
        if let Some(t) = &topology {
            for (i, d) in s.node_down.iter().enumerate() {
                if !t.nodes().iter().any(|n| n.id == d.node) {
                    errors.push(format!("simulate.node_down[{i}].node: unknown node {}", d.node));
                }
            }
            for (i, d) in s.device_faults.iter().enumerate() {
                if t.device(d.device).is_none() {
                    errors.push(format!("simulate.device_faults[{i}].device: unknown device {}", d.device));
                }
            }
        }
        match (errors.is_empty(), topology, sim_policy) {
            (true, Some(topology), Some(sim_policy)) => Ok(Loaded {
                config: self,
                topology,
                policies,
                sim_policy,
            }),
            _ => Err(CliError::Config(errors)),
        }
    }
}

/// Reads the config (defaults when `path` is `None`), applies overrides and
/// validates.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Loaded, CliError> {
    let (mut config, base) = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(vec![format!("config: {}: {e}", p.display())]))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (ExperimentConfig::from_json(&text)?, base)
        }
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    config.apply(overrides);
    config.validate(&base)
}
