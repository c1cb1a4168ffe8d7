//! Configuration ingestion: a strict TOML surface resolved into a fully
//! populated [`RunConfig`] before any simulation starts.
//!
//! Recognized sections: `[cluster]`, `[storage]`, `[[templates]]`,
//! `[stages.windows_xp]`, `[stages.linux]`, `[calibration]`. Every key is
//! optional and falls back to the calibrated five-node defaults; unknown
//! keys are rejected rather than ignored.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchitectureKind;
use crate::cloud::{Calibration, RunSetup, Warmup};
use crate::domain::{
    validate_templates, ClusterSpec, ImageTemplate, MacPool, NodeSpec, OsFamily, SharedStorageSpec,
    ValidationError,
};
use crate::lifecycle::{StageDurations, StageTable};
use crate::scenario::{Scenario, ScenarioKind};

pub const DEFAULT_NODES: usize = 5;
pub const DEFAULT_NODE_DISK_MIB: f64 = 512_000.0;
pub const DEFAULT_NIC_MIB_S: f64 = 117.0;
pub const DEFAULT_LOCAL_DISK_MIB_S: f64 = 640.0;
pub const DEFAULT_MAX_RECEIVES: u32 = 1;
pub const DEFAULT_RAM_MIB: f64 = 8192.0;
pub const DEFAULT_MAC_POOL: usize = 20;
pub const DEFAULT_CENTRAL_DISK_MIB_S: f64 = 22.0;
pub const DEFAULT_IMAGE_MIB: f64 = 8192.0;
pub const DEFAULT_RUNS: usize = 3;
pub const DEFAULT_SEED: u64 = 42;

/// Everything a run needs, resolved and validated. File-backed fields
/// come from [`parse_config`]; the rest (architecture, scenario, seeds,
/// output paths) default here and are overridden by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchitectureKind,
    pub scenario: Scenario,
    pub runs: usize,
    pub seed: u64,
    pub jitter_sigma: f64,
    pub warmup: Warmup,
    pub cluster: ClusterSpec,
    pub templates: Vec<ImageTemplate>,
    pub stages: StageTable,
    pub calibration: Calibration,
    pub out_path: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
}

impl RunConfig {
    /// Assembles the simulator setup for the configured architecture.
    /// The storage co-location flag is descriptive and follows the
    /// architecture choice: only the second architecture shares the
    /// front end with the storage array.
    pub fn setup(&self) -> RunSetup {
        let mut cluster = self.cluster.clone();
        cluster.storage.colocated_with_frontend =
            self.arch == ArchitectureKind::Arch2CentralWithFrontend;
        RunSetup {
            arch: self.arch,
            cluster,
            templates: self.templates.clone(),
            stages: self.stages.clone(),
            calibration: self.calibration,
            jitter_sigma: self.jitter_sigma,
            seed: self.seed,
            warmup: self.warmup,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("template {id:?}: unknown os {os:?} (expected \"windows_xp\" or \"linux\")")]
    UnknownOs { id: String, os: String },
    #[error(
        "linux stages take no sid_reset_s; the security-identifier reset only exists on windows"
    )]
    SidResetOnLinux,
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    cluster: RawCluster,
    storage: RawStorage,
    #[serde(skip_serializing_if = "Option::is_none")]
    templates: Option<Vec<RawTemplate>>,
    stages: RawStages,
    calibration: RawCalibration,
}

macro_rules! raw_section {
    ($name:ident { $($field:ident: $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        struct $name {
            $(
                #[serde(skip_serializing_if = "Option::is_none")]
                $field: Option<$ty>,
            )*
        }
    };
}

raw_section!(RawCluster {
    nodes: usize,
    disk_capacity_mib: f64,
    nic_mib_s: f64,
    local_disk_mib_s: f64,
    max_concurrent_receives: u32,
    ram_mib: f64,
    mac_pool: usize,
});

raw_section!(RawStorage {
    disk_rate_mib_s: f64,
    nic_mib_s: f64,
});

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size_mib: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    os: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<u32>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawStages {
    windows_xp: RawStageSet,
    linux: RawStageSet,
}

raw_section!(RawStageSet {
    booting_s: f64,
    mac_lookup_s: f64,
    renaming_s: f64,
    sid_reset_s: f64,
    rebooting_s: f64,
});

raw_section!(RawCalibration {
    ssh_stream_rate_mib_s: f64,
    frontend_transfer_rate_mib_s: f64,
    register_s: f64,
    colocation_factor: f64,
});

fn resolve_cluster(raw: &RawCluster, storage: &RawStorage) -> Result<ClusterSpec, ValidationError> {
    let n = raw.nodes.unwrap_or(DEFAULT_NODES);
    let nodes = (0..n)
        .map(|i| NodeSpec {
            id: format!("esxi{}", i + 1),
            disk_capacity_mib: raw.disk_capacity_mib.unwrap_or(DEFAULT_NODE_DISK_MIB),
            nic_mib_s: raw.nic_mib_s.unwrap_or(DEFAULT_NIC_MIB_S),
            local_disk_mib_s: raw.local_disk_mib_s.unwrap_or(DEFAULT_LOCAL_DISK_MIB_S),
            max_concurrent_receives: raw.max_concurrent_receives.unwrap_or(DEFAULT_MAX_RECEIVES),
            ram_mib: raw.ram_mib.unwrap_or(DEFAULT_RAM_MIB),
        })
        .collect();
    ClusterSpec {
        nodes,
        storage: SharedStorageSpec {
            disk_rate_mib_s: storage
                .disk_rate_mib_s
                .unwrap_or(DEFAULT_CENTRAL_DISK_MIB_S),
            nic_mib_s: storage.nic_mib_s.unwrap_or(DEFAULT_NIC_MIB_S),
            colocated_with_frontend: false,
        },
        mac_entries: MacPool::default_entries(raw.mac_pool.unwrap_or(DEFAULT_MAC_POOL)),
    }
    .validate()
}

fn resolve_templates(raw: &Option<Vec<RawTemplate>>) -> Result<Vec<ImageTemplate>, ConfigError> {
    let templates = match raw {
        None => vec![ImageTemplate {
            id: "winxp-base".into(),
            size_mib: DEFAULT_IMAGE_MIB,
            os: OsFamily::WindowsXp,
            version: 1,
        }],
        Some(list) => list
            .iter()
            .map(|t| {
                let os = match t.os.as_deref().unwrap_or("windows_xp") {
                    "windows_xp" => OsFamily::WindowsXp,
                    "linux" => OsFamily::Linux,
                    other => {
                        return Err(ConfigError::UnknownOs {
                            id: t.id.clone(),
                            os: other.to_string(),
                        })
                    }
                };
                Ok(ImageTemplate {
                    id: t.id.clone(),
                    size_mib: t.size_mib.unwrap_or(DEFAULT_IMAGE_MIB),
                    os,
                    version: t.version.unwrap_or(1),
                })
            })
            .collect::<Result<_, _>>()?,
    };
    validate_templates(&templates)?;
    Ok(templates)
}

fn resolve_stage_set(raw: &RawStageSet, default_sid: Option<f64>) -> StageDurations {
    StageDurations {
        booting_s: raw.booting_s.unwrap_or(90.0),
        mac_lookup_s: raw.mac_lookup_s.unwrap_or(30.0),
        renaming_s: raw.renaming_s.unwrap_or(30.0),
        sid_reset_s: raw.sid_reset_s.or(default_sid),
        rebooting_s: raw.rebooting_s.unwrap_or(120.0),
    }
}

fn resolve_stages(raw: &RawStages) -> Result<StageTable, ConfigError> {
    if raw.linux.sid_reset_s.is_some() {
        return Err(ConfigError::SidResetOnLinux);
    }
    Ok(StageTable {
        windows_xp: resolve_stage_set(&raw.windows_xp, Some(300.0)),
        linux: resolve_stage_set(&raw.linux, None),
    })
}

fn resolve_calibration(raw: &RawCalibration) -> Calibration {
    let d = Calibration::default();
    Calibration {
        ssh_stream_rate_mib_s: raw.ssh_stream_rate_mib_s.unwrap_or(d.ssh_stream_rate_mib_s),
        frontend_transfer_rate_mib_s: raw
            .frontend_transfer_rate_mib_s
            .unwrap_or(d.frontend_transfer_rate_mib_s),
        register_s: raw.register_s.unwrap_or(d.register_s),
        colocation_factor: raw.colocation_factor.unwrap_or(d.colocation_factor),
    }
}

/// Parses file contents into a fully resolved, validated configuration.
/// An empty file yields the calibrated default cluster.
pub fn parse_config(contents: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(contents)?;
    Ok(RunConfig {
        arch: ArchitectureKind::Arch1CentralNoFrontend,
        scenario: Scenario::new(ScenarioKind::SingleBurst),
        runs: DEFAULT_RUNS,
        seed: DEFAULT_SEED,
        jitter_sigma: 0.0,
        warmup: Warmup::Full,
        cluster: resolve_cluster(&raw.cluster, &raw.storage)?,
        templates: resolve_templates(&raw.templates)?,
        stages: resolve_stages(&raw.stages)?,
        calibration: resolve_calibration(&raw.calibration),
        out_path: None,
        trace_path: None,
    })
}

/// Echoes the file-backed sections of a resolved configuration as TOML.
/// Parsing the echo reproduces the same resolved configuration.
pub fn emit_config(config: &RunConfig) -> String {
    let node = config
        .cluster
        .nodes
        .first()
        .expect("validated cluster has at least one node");
    let os_label = |os: OsFamily| match os {
        OsFamily::WindowsXp => "windows_xp",
        OsFamily::Linux => "linux",
    };
    let stage_set = |s: &StageDurations| RawStageSet {
        booting_s: Some(s.booting_s),
        mac_lookup_s: Some(s.mac_lookup_s),
        renaming_s: Some(s.renaming_s),
        sid_reset_s: s.sid_reset_s,
        rebooting_s: Some(s.rebooting_s),
    };
    let raw = RawConfig {
        cluster: RawCluster {
            nodes: Some(config.cluster.nodes.len()),
            disk_capacity_mib: Some(node.disk_capacity_mib),
            nic_mib_s: Some(node.nic_mib_s),
            local_disk_mib_s: Some(node.local_disk_mib_s),
            max_concurrent_receives: Some(node.max_concurrent_receives),
            ram_mib: Some(node.ram_mib),
            mac_pool: Some(config.cluster.mac_entries.len()),
        },
        storage: RawStorage {
            disk_rate_mib_s: Some(config.cluster.storage.disk_rate_mib_s),
            nic_mib_s: Some(config.cluster.storage.nic_mib_s),
        },
        templates: Some(
            config
                .templates
                .iter()
                .map(|t| RawTemplate {
                    id: t.id.clone(),
                    size_mib: Some(t.size_mib),
                    os: Some(os_label(t.os).to_string()),
                    version: Some(t.version),
                })
                .collect(),
        ),
        stages: RawStages {
            windows_xp: stage_set(&config.stages.windows_xp),
            linux: stage_set(&config.stages.linux),
        },
        calibration: RawCalibration {
            ssh_stream_rate_mib_s: Some(config.calibration.ssh_stream_rate_mib_s),
            frontend_transfer_rate_mib_s: Some(config.calibration.frontend_transfer_rate_mib_s),
            register_s: Some(config.calibration.register_s),
            colocation_factor: Some(config.calibration.colocation_factor),
        },
    };
    toml::to_string_pretty(&raw).expect("resolved config serializes")
}
