use hrms_core::engine::{rng_stream, Engine, EventKind};
use hrms_core::platform::{
    comm_cost, discover, Device, DeviceKind, Node, ThermalGrid, ThermalParams, Topology, GRID_CELLS, GRID_COLS,
    GRID_ROWS, MAX_CELL_POWER_W,
};
use proptest::prelude::*;
use rand::Rng;
use std::collections::VecDeque;

fn run_schedule(times: &[f64]) -> Vec<(f64, u64, u64)> {
    let mut engine = Engine::new();
    for (i, &t) in times.iter().enumerate() {
        engine.schedule(t, EventKind::JobArrival { job: i as u64 }).unwrap();
    }
    // every third arrival spawns a follow-up at the same instant
    engine
        .run_until(f64::INFINITY, |e, q| {
            if let EventKind::JobArrival { job } = e.kind {
                if job % 3 == 0 {
                    q.schedule(e.time.secs(), EventKind::JobDone { job })?;
                }
            }
            Ok::<_, hrms_core::engine::EngineError>(())
        })
        .unwrap();
    engine
        .trace()
        .iter()
        .map(|e| {
            let job = match e.kind {
                EventKind::JobArrival { job } | EventKind::JobDone { job } => job,
                _ => unreachable!(),
            };
            (e.time.secs(), e.seq, job)
        })
        .collect()
}

proptest! {
    #[test]
    fn trace_is_ordered_and_reproducible(times in prop::collection::vec(0.0f64..100.0, 0..60)) {
        let a = run_schedule(&times);
        let b = run_schedule(&times);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), times.len() + times.len().div_ceil(3));
        for w in a.windows(2) {
            prop_assert!(w[0].0 < w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1));
        }
    }

    #[test]
    fn streams_depend_only_on_key(seed in any::<u64>(), a in 0u64..50, b in 0u64..50) {
        let draw = |label: &str| {
            let mut r = rng_stream(seed, label, &[a, b]);
            (0..4).map(|_| r.random()).collect::<Vec<u64>>()
        };
        let (x, y, z) = (draw("faults"), draw("faults"), draw("costs"));
        prop_assert_eq!(&x, &y);
        prop_assert_ne!(&x, &z);
    }
}

fn nodes(n: usize, devices_per_node: usize) -> Vec<Node> {
    (0..n as u64)
        .map(|id| Node {
            id,
            devices: (0..devices_per_node as u64)
                .map(|k| {
                    let kind = [DeviceKind::Cpu, DeviceKind::Gpu, DeviceKind::Fpga][k as usize % 3];
                    Device::new(100 * id + k, kind, id, 1.0)
                })
                .collect(),
        })
        .collect()
}

/// Breadth-first hop counts from `start` over undirected links.
fn bfs(n: usize, links: &[(u64, u64)], start: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; n];
    dist[start] = Some(0);
    let mut q = VecDeque::from([start]);
    while let Some(u) = q.pop_front() {
        for &(a, b) in links {
            let (a, b) = (a as usize, b as usize);
            let v = if a == u { b } else if b == u { a } else { continue };
            if dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

fn connected_links() -> impl Strategy<Value = (usize, Vec<(u64, u64)>)> {
    (2usize..8).prop_flat_map(|n| {
        // a random spanning tree plus extra edges
        let tree = prop::collection::vec(any::<prop::sample::Index>(), n - 1);
        let extra = prop::collection::vec((0..n as u64, 0..n as u64), 0..n);
        (Just(n), tree, extra).prop_map(|(n, tree, extra)| {
            let mut links: Vec<(u64, u64)> = tree
                .iter()
                .enumerate()
                .map(|(i, ix)| ((i + 1) as u64, ix.index(i + 1) as u64))
                .collect();
            links.extend(extra);
            (n, links)
        })
    })
}

proptest! {
    #[test]
    fn views_agree_and_hops_match_bfs((n, links) in connected_links(), per_node in 1usize..4) {
        let topo = Topology::from_links(nodes(n, per_node), &links).unwrap();
        let views = discover(&topo);
        prop_assert_eq!(views.len(), n);
        for v in &views {
            prop_assert_eq!(v.device_ids(), views[0].device_ids());
        }
        for i in 0..n {
            let dist = bfs(n, &links, i);
            for j in 0..n {
                prop_assert_eq!(Some(topo.hops(i as u64, j as u64).unwrap()), dist[j]);
                for d in &topo.nodes()[j].devices {
                    prop_assert_eq!(Some(comm_cost(&views[i], d.id).unwrap()), dist[j]);
                }
            }
        }
        // single devices on a and b see each other at the same distance
        for a in 0..n {
            for b in 0..n {
                let da = topo.nodes()[a].devices[0].id;
                let db = topo.nodes()[b].devices[0].id;
                prop_assert_eq!(comm_cost(&views[a], db).unwrap(), comm_cost(&views[b], da).unwrap());
            }
        }
    }
}

#[test]
fn line_topology_hops_are_index_distance() {
    let n = 6;
    let links: Vec<(u64, u64)> = (0..n as u64 - 1).map(|i| (i, i + 1)).collect();
    let topo = Topology::from_links(nodes(n, 1), &links).unwrap();
    for i in 0..n as u64 {
        for j in 0..n as u64 {
            assert_eq!(topo.hops(i, j).unwrap() as u64, i.abs_diff(j));
        }
    }
}

#[test]
fn disconnected_topology_is_rejected() {
    assert!(Topology::from_links(nodes(3, 1), &[(0, 1)]).is_err());
}

fn power_map() -> impl Strategy<Value = [f64; GRID_CELLS]> {
    prop::array::uniform16(0.0..=MAX_CELL_POWER_W)
}

fn steady(map: &[f64; GRID_CELLS]) -> [f64; GRID_CELLS] {
    let mut g = ThermalGrid::new(ThermalParams::default()).unwrap();
    g.set_power_map(map).unwrap();
    g.steady_state_temp()
}

proptest! {
    #[test]
    fn steady_state_is_linear_in_power(p1 in power_map(), p2 in power_map()) {
        let amb = ThermalParams::default().ambient_k;
        // halve so the sum stays under the cell cap
        let h1 = p1.map(|w| w / 2.0);
        let h2 = p2.map(|w| w / 2.0);
        let mut sum = [0.0; GRID_CELLS];
        for i in 0..GRID_CELLS {
            sum[i] = h1[i] + h2[i];
        }
        let (t1, t2, t12) = (steady(&h1), steady(&h2), steady(&sum));
        for i in 0..GRID_CELLS {
            let expect = (t1[i] - amb) + (t2[i] - amb);
            let got = t12[i] - amb;
            prop_assert!((got - expect).abs() <= 1e-9 * expect.abs().max(1.0), "{} vs {}", got, expect);
        }
    }

    #[test]
    fn steady_state_balances_energy(p in power_map()) {
        let params = ThermalParams::default();
        let t = steady(&p);
        let total: f64 = p.iter().sum();
        let out: f64 = t.iter().map(|ti| params.vertical_conductance * (ti - params.ambient_k)).sum();
        prop_assert!((total - out).abs() <= 1e-6 * total.max(1.0));
    }

    #[test]
    fn steady_state_commutes_with_mirroring(p in power_map()) {
        let mirror = |m: &[f64; GRID_CELLS]| {
            let mut out = [0.0; GRID_CELLS];
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    out[r * GRID_COLS + c] = m[(GRID_ROWS - 1 - r) * GRID_COLS + c];
                }
            }
            out
        };
        let a = mirror(&steady(&p));
        let b = steady(&mirror(&p));
        for i in 0..GRID_CELLS {
            prop_assert!((a[i] - b[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn euler_steps_approach_steady_state(p in power_map()) {
        let mut g = ThermalGrid::new(ThermalParams::default()).unwrap();
        g.set_power_map(&p).unwrap();
        let target = g.steady_state_temp();
        let dt = 0.5 * g.stability_bound();
        let gap = |g: &ThermalGrid| {
            g.temperatures().iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let start = gap(&g);
        for _ in 0..2000 {
            g.step_temp(dt).unwrap();
        }
        prop_assert!(gap(&g) <= 1e-6 * start.max(1.0));
    }
}
