//! Simulation and policy library for hierarchical runtime resource management
//! of heterogeneous HPC clusters.
//!
//! - [`engine`]: deterministic discrete-event kernel and seeded streams.
//! - [`platform`]: topology, the disaggregated resource view, thermal grid.
//! - [`workload`]: jobs, kernels, timing requirements, workload generation.
//! - [`reliability`]: faults, prediction, checkpoint policies, job automaton.
//! - [`rtms`]: global dispatcher and per-node local managers.
//! - [`pwcet`]: exponential-tail pWCET estimation.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod platform;
pub mod pwcet;
pub mod reliability;
pub mod rtms;
pub mod stats;
pub mod workload;
