//! Deterministic discrete-event simulator of virtual-machine provisioning
//! on a small private cluster.
//!
//! The library models four deployment architectures — central storage
//! with and without a co-located front end, per-request remote copies,
//! and node-local image caches — and drives them through four benchmark
//! arrival patterns. Bandwidth contention is resolved by max-min fair
//! sharing on explicit links; booted VMs walk a fixed contextualization
//! state machine (boot, address lookup, rename, optional security-id
//! reset, reboot). Identical configuration and seed always reproduce
//! identical traces, byte for byte, with or without the rayon-backed
//! `parallel` feature.

pub mod arch;
pub mod calibrate;
pub mod cloud;
pub mod config;
pub mod domain;
pub mod engine;
pub mod image;
pub mod lifecycle;
pub mod report;
pub mod scenario;

pub use arch::ArchitectureKind;
pub use calibrate::{calibrate, parse_targets, CandidateGrid};
pub use cloud::{Calibration, CloudError, CloudSim, RunOutcome, RunSetup, Warmup};
pub use config::{emit_config, parse_config, ConfigError, RunConfig};
pub use domain::{ClusterSpec, ImageTemplate, NodeId, TemplateId, VmId, VmRequest};
pub use engine::{Engine, SimError};
pub use lifecycle::LifecycleState;
pub use report::{render_csv, render_summary, render_trace_csv};
pub use scenario::{
    generate_requests, run_experiment, sweep_grid, sweep_grid_serial, ExperimentResult, Scenario,
    ScenarioKind,
};
