//! Cluster topology, the disaggregated resource view and the per-node thermal
//! grid.
//!
//! Every node sees every device in the cluster; what differs between
//! observers is the hop count needed to reach a device. Discovery is computed
//! directly from the topology description.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("hop matrix is {rows}x{cols} but there are {nodes} nodes")]
    HopShape { rows: usize, cols: usize, nodes: usize },
    #[error("topology is disconnected: no hop entry between node {a} and node {b}")]
    Disconnected { a: u64, b: u64 },
    #[error("hop matrix is not symmetric at ({a}, {b})")]
    Asymmetric { a: u64, b: u64 },
    #[error("hop matrix diagonal for node {0} is not zero")]
    NonZeroDiagonal(u64),
    #[error("triangle inequality violated: {a}->{c} is longer than {a}->{b}->{c}")]
    Triangle { a: u64, b: u64, c: u64 },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("device {0}: speed factor must be positive and powers non-negative")]
    InvalidDevice(u64),
    #[error("unknown device {0}")]
    UnknownDevice(u64),
    #[error("unknown node {0}")]
    UnknownNode(u64),
    #[error("unknown device kind '{0}'")]
    UnknownKind(String),
    #[error("conductances and heat capacity must be positive")]
    NonPositiveConductance,
    #[error("cell {cell}: power {watts} W outside [0, {max}] W")]
    CellPower { cell: usize, watts: f64, max: f64 },
    #[error("time step {dt} s exceeds the explicit stability bound {bound} s")]
    UnstableStep { dt: f64, bound: f64 },
    #[error("cell index {0} out of range")]
    CellIndex(usize),
    #[error("invalid topology json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DeviceKind {
    Cpu,
    Gpu,
    Manycore,
    Fpga,
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DeviceKind::Cpu => "CPU",
            DeviceKind::Gpu => "GPU",
            DeviceKind::Manycore => "MANYCORE",
            DeviceKind::Fpga => "FPGA",
        };
        f.write_str(s)
    }
}

impl FromStr for DeviceKind {
    type Err = PlatformError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CPU" => Ok(DeviceKind::Cpu),
            "GPU" => Ok(DeviceKind::Gpu),
            "MANYCORE" => Ok(DeviceKind::Manycore),
            "FPGA" => Ok(DeviceKind::Fpga),
            _ => Err(PlatformError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: u64,
    pub kind: DeviceKind,
    /// Filled in from the enclosing node when loading a topology file.
    #[serde(default)]
    pub node: u64,
    pub speed_factor: f64,
    pub idle_w: f64,
    pub busy_w: f64,
}

impl Device {
    pub fn new(id: u64, kind: DeviceKind, node: u64, speed_factor: f64) -> Self {
        Device {
            id,
            kind,
            node,
            speed_factor,
            idle_w: 0.0,
            busy_w: 0.0,
        }
    }

    pub fn with_power(mut self, idle_w: f64, busy_w: f64) -> Self {
        self.idle_w = idle_w;
        self.busy_w = busy_w;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: u64,
    pub devices: Vec<Device>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TopologyFile {
    nodes: Vec<Node>,
    hops: Vec<Vec<Option<u32>>>,
}

/// Nodes with their attached devices plus the node-to-node hop matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: Vec<Node>,
    hops: Vec<Vec<u32>>,
}

impl Topology {
    /// Builds a topology from an explicit hop matrix, indexed by node position.
    pub fn new(mut nodes: Vec<Node>, hops: Vec<Vec<u32>>) -> Result<Self, PlatformError> {
        for node in &mut nodes {
            for d in &mut node.devices {
                d.node = node.id;
            }
        }
        let topo = Topology { nodes, hops };
        topo.validate()?;
        Ok(topo)
    }

    /// Builds the hop matrix as shortest paths over undirected `links`
    /// between node ids.
    pub fn from_links(nodes: Vec<Node>, links: &[(u64, u64)]) -> Result<Self, PlatformError> {
        let n = nodes.len();
        let pos = |id: u64| {
            nodes
                .iter()
                .position(|nd| nd.id == id)
                .ok_or(PlatformError::UnknownNode(id))
        };
        let mut dist = vec![vec![None; n]; n];
        for (i, row) in dist.iter_mut().enumerate() {
            row[i] = Some(0u32);
        }
        for &(a, b) in links {
            let (i, j) = (pos(a)?, pos(b)?);
            if i != j {
                dist[i][j] = Some(1);
                dist[j][i] = Some(1);
            }
        }
        // Floyd-Warshall
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if let (Some(ik), Some(kj)) = (dist[i][k], dist[k][j]) {
                        if dist[i][j].is_none_or(|d| ik + kj < d) {
                            dist[i][j] = Some(ik + kj);
                        }
                    }
                }
            }
        }
        let hops = to_complete(&nodes, dist)?;
        Topology::new(nodes, hops)
    }

    pub fn from_json(text: &str) -> Result<Self, PlatformError> {
        let file: TopologyFile =
            serde_json::from_str(text).map_err(|e| PlatformError::Json(e.to_string()))?;
        let hops = to_complete(&file.nodes, file.hops)?;
        Topology::new(file.nodes, hops)
    }

    pub fn to_json(&self) -> String {
        let file = TopologyFile {
            nodes: self.nodes.clone(),
            hops: self
                .hops
                .iter()
                .map(|r| r.iter().map(|&h| Some(h)).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("topology serializes")
    }

    fn validate(&self) -> Result<(), PlatformError> {
        let n = self.nodes.len();
        if self.hops.len() != n || self.hops.iter().any(|r| r.len() != n) {
            return Err(PlatformError::HopShape {
                rows: self.hops.len(),
                cols: self.hops.first().map_or(0, |r| r.len()),
                nodes: n,
            });
        }
        let mut node_ids = HashSet::new();
        let mut dev_ids = HashSet::new();
        for node in &self.nodes {
            if !node_ids.insert(node.id) {
                return Err(PlatformError::DuplicateId(node.id));
            }
            for d in &node.devices {
                if !dev_ids.insert(d.id) {
                    return Err(PlatformError::DuplicateId(d.id));
                }
                if !(d.speed_factor > 0.0 && d.idle_w >= 0.0 && d.busy_w >= 0.0) {
                    return Err(PlatformError::InvalidDevice(d.id));
                }
            }
        }
        let id = |i: usize| self.nodes[i].id;
        for i in 0..n {
            if self.hops[i][i] != 0 {
                return Err(PlatformError::NonZeroDiagonal(id(i)));
            }
            for j in 0..n {
                if self.hops[i][j] != self.hops[j][i] {
                    return Err(PlatformError::Asymmetric { a: id(i), b: id(j) });
                }
                for k in 0..n {
                    if self.hops[i][k] > self.hops[i][j] + self.hops[j][k] {
                        return Err(PlatformError::Triangle {
                            a: id(i),
                            b: id(j),
                            c: id(k),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn devices(&self) -> impl Iterator<Item = &Device> {
        self.nodes.iter().flat_map(|n| n.devices.iter())
    }

    pub fn device(&self, id: u64) -> Option<&Device> {
        self.devices().find(|d| d.id == id)
    }

    fn node_pos(&self, id: u64) -> Result<usize, PlatformError> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or(PlatformError::UnknownNode(id))
    }

    pub fn hops(&self, from_node: u64, to_node: u64) -> Result<u32, PlatformError> {
        Ok(self.hops[self.node_pos(from_node)?][self.node_pos(to_node)?])
    }
}

fn to_complete(nodes: &[Node], hops: Vec<Vec<Option<u32>>>) -> Result<Vec<Vec<u32>>, PlatformError> {
    let n = nodes.len();
    if hops.len() != n || hops.iter().any(|r| r.len() != n) {
        return Err(PlatformError::HopShape {
            rows: hops.len(),
            cols: hops.first().map_or(0, |r| r.len()),
            nodes: n,
        });
    }
    hops.into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .enumerate()
                .map(|(j, h)| {
                    h.ok_or(PlatformError::Disconnected {
                        a: nodes[i].id,
                        b: nodes[j].id,
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceStatus {
    Free,
    Busy,
    Down,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub device: Device,
    pub hops: u32,
    pub status: DeviceStatus,
}

/// One node's picture of the whole cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalResourceView {
    pub observer: u64,
    pub entries: Vec<ViewEntry>,
}

impl GlobalResourceView {
    pub fn entry(&self, device: u64) -> Option<&ViewEntry> {
        self.entries.iter().find(|e| e.device.id == device)
    }

    pub fn entry_mut(&mut self, device: u64) -> Option<&mut ViewEntry> {
        self.entries.iter_mut().find(|e| e.device.id == device)
    }

    pub fn device_ids(&self) -> Vec<u64> {
        let mut ids: Vec<_> = self.entries.iter().map(|e| e.device.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn set_status(&mut self, device: u64, status: DeviceStatus) -> Result<(), PlatformError> {
        self.entry_mut(device)
            .map(|e| e.status = status)
            .ok_or(PlatformError::UnknownDevice(device))
    }
}

/// Computes the view of every node, in node order.
pub fn discover(topology: &Topology) -> Vec<GlobalResourceView> {
    topology
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, observer)| GlobalResourceView {
            observer: observer.id,
            entries: topology
                .nodes()
                .iter()
                .enumerate()
                .flat_map(|(j, node)| {
                    let hops = topology.hops[i][j];
                    node.devices.iter().map(move |d| ViewEntry {
                        device: d.clone(),
                        hops,
                        status: DeviceStatus::Free,
                    })
                })
                .collect(),
        })
        .collect()
}

/// Hops from the view's observer to `device`.
pub fn comm_cost(view: &GlobalResourceView, device: u64) -> Result<u32, PlatformError> {
    view.entry(device)
        .map(|e| e.hops)
        .ok_or(PlatformError::UnknownDevice(device))
}

pub const GRID_ROWS: usize = 4;
pub const GRID_COLS: usize = 4;
pub const GRID_CELLS: usize = GRID_ROWS * GRID_COLS;
pub const MAX_CELL_POWER_W: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalParams {
    pub ambient_k: f64,
    pub vertical_conductance: f64,
    pub lateral_conductance: f64,
    pub heat_capacity: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        ThermalParams {
            ambient_k: 318.0,
            vertical_conductance: 0.8,
            lateral_conductance: 2.0,
            heat_capacity: 0.5,
        }
    }
}

pub type CellMap = [f64; GRID_CELLS];

/// 4x4 lattice RC network: every cell leaks to ambient through the vertical
/// conductance and to its 4-neighbours through the lateral conductance.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalGrid {
    params: ThermalParams,
    power: CellMap,
    temp: CellMap,
}

fn neighbours(cell: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (cell / GRID_COLS, cell % GRID_COLS);
    let up = (r > 0).then(|| cell - GRID_COLS);
    let down = (r + 1 < GRID_ROWS).then(|| cell + GRID_COLS);
    let left = (c > 0).then(|| cell - 1);
    let right = (c + 1 < GRID_COLS).then(|| cell + 1);
    [up, down, left, right].into_iter().flatten()
}

impl ThermalGrid {
    pub fn new(params: ThermalParams) -> Result<Self, PlatformError> {
        if !(params.vertical_conductance > 0.0
            && params.lateral_conductance > 0.0
            && params.heat_capacity > 0.0)
        {
            return Err(PlatformError::NonPositiveConductance);
        }
        Ok(ThermalGrid {
            params,
            power: [0.0; GRID_CELLS],
            temp: [params.ambient_k; GRID_CELLS],
        })
    }

    pub fn params(&self) -> &ThermalParams {
        &self.params
    }

    pub fn power(&self) -> &CellMap {
        &self.power
    }

    pub fn temperatures(&self) -> &CellMap {
        &self.temp
    }

    pub fn set_temperatures(&mut self, temp: CellMap) {
        self.temp = temp;
    }

    pub fn total_power(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn set_power(&mut self, cell: usize, watts: f64) -> Result<(), PlatformError> {
        if cell >= GRID_CELLS {
            return Err(PlatformError::CellIndex(cell));
        }
        if !(0.0..=MAX_CELL_POWER_W).contains(&watts) {
            return Err(PlatformError::CellPower {
                cell,
                watts,
                max: MAX_CELL_POWER_W,
            });
        }
        self.power[cell] = watts;
        Ok(())
    }

    pub fn set_power_map(&mut self, map: &CellMap) -> Result<(), PlatformError> {
        for (cell, &w) in map.iter().enumerate() {
            self.set_power(cell, w)?;
        }
        Ok(())
    }

    fn conductance_matrix(&self) -> DMatrix<f64> {
        let gl = self.params.lateral_conductance;
        let mut a = DMatrix::zeros(GRID_CELLS, GRID_CELLS);
        for i in 0..GRID_CELLS {
            a[(i, i)] = self.params.vertical_conductance;
            for j in neighbours(i) {
                a[(i, i)] += gl;
                a[(i, j)] -= gl;
            }
        }
        a
    }

    /// Steady-state temperature map for the current power map.
    pub fn steady_state_temp(&self) -> CellMap {
        let a = self.conductance_matrix();
        let gv = self.params.vertical_conductance;
        let rhs = DVector::from_iterator(
            GRID_CELLS,
            self.power.iter().map(|p| p + gv * self.params.ambient_k),
        );
        // the matrix is symmetric, strictly diagonally dominant: always solvable
        let sol = a
            .lu()
            .solve(&rhs)
            .expect("conductance matrix is non-singular");
        let mut out = [0.0; GRID_CELLS];
        out.copy_from_slice(sol.as_slice());
        out
    }

    /// Largest explicit-Euler step that keeps the update stable, from the
    /// Gershgorin bound on the conductance matrix.
    pub fn stability_bound(&self) -> f64 {
        let gv = self.params.vertical_conductance;
        let gl = self.params.lateral_conductance;
        let worst_row = (0..GRID_CELLS)
            .map(|i| gv + 2.0 * gl * neighbours(i).count() as f64)
            .fold(0.0, f64::max);
        2.0 * self.params.heat_capacity / worst_row
    }

    /// One explicit first-order RC update.
    pub fn step_temp(&mut self, dt: f64) -> Result<(), PlatformError> {
        let bound = self.stability_bound();
        if !(dt > 0.0 && dt < bound) {
            return Err(PlatformError::UnstableStep { dt, bound });
        }
        let p = &self.params;
        let old = self.temp;
        for i in 0..GRID_CELLS {
            let mut flow = self.power[i] - p.vertical_conductance * (old[i] - p.ambient_k);
            for j in neighbours(i) {
                flow -= p.lateral_conductance * (old[i] - old[j]);
            }
            self.temp[i] = old[i] + dt * flow / p.heat_capacity;
        }
        Ok(())
    }

    pub fn max_temp(&self) -> f64 {
        self.temp.iter().copied().fold(f64::MIN, f64::max)
    }
}

/// Spreads device power over the grid. Cell `k` belongs to device
/// `k % devices.len()`; a device's power is split evenly over its cells and
/// each cell is capped at 12 W. Returns the map and the watts lost to capping.
pub fn device_power_map<'a>(
    devices: impl IntoIterator<Item = (&'a Device, bool)>,
) -> (CellMap, f64) {
    let devs: Vec<_> = devices.into_iter().collect();
    let mut map = [0.0; GRID_CELLS];
    let mut clipped = 0.0;
    if devs.is_empty() {
        return (map, clipped);
    }
    for (k, cell) in map.iter_mut().enumerate() {
        let idx = k % devs.len();
        let (dev, busy) = devs[idx];
        let cells_owned = (0..GRID_CELLS).filter(|c| c % devs.len() == idx).count();
        let watts = if busy { dev.busy_w } else { dev.idle_w } / cells_owned as f64;
        *cell = watts.min(MAX_CELL_POWER_W);
        clipped += watts - *cell;
    }
    (map, clipped)
}
