//! The four deployment architectures, encoded as pure provisioning
//! strategies: given a request and a view of cluster state, each produces
//! an ordered plan of resource-consuming stages.
//!
//! - `arch1`: template cloned on central shared storage; the storage box
//!   is dedicated (no front-end services on it).
//! - `arch2`: identical, but the storage box also hosts the front end,
//!   which taxes its disk and NIC by a configurable colocation factor.
//! - `arch3`: template pushed to the target node's local disk over SSH
//!   from the front end; per-stream rate capped, per-node admission
//!   limited.
//! - `arch4`: template pre-cached on every node by the image registry;
//!   provisioning is a local clone.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::domain::{ImageTemplate, NodeId, VmId};
use crate::lifecycle::LifecycleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchitectureKind {
    Arch1CentralNoFrontend,
    Arch2CentralWithFrontend,
    Arch3DistributedRemoteCopy,
    Arch4DistributedLocalCache,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 4] = [
        ArchitectureKind::Arch1CentralNoFrontend,
        ArchitectureKind::Arch2CentralWithFrontend,
        ArchitectureKind::Arch3DistributedRemoteCopy,
        ArchitectureKind::Arch4DistributedLocalCache,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ArchitectureKind::Arch1CentralNoFrontend => "arch1",
            ArchitectureKind::Arch2CentralWithFrontend => "arch2",
            ArchitectureKind::Arch3DistributedRemoteCopy => "arch3",
            ArchitectureKind::Arch4DistributedLocalCache => "arch4",
        }
    }

    /// The VM's virtual disk lives on central shared storage.
    pub fn uses_central_storage(self) -> bool {
        matches!(
            self,
            ArchitectureKind::Arch1CentralNoFrontend | ArchitectureKind::Arch2CentralWithFrontend
        )
    }

    /// The image registry pre-distributes templates for this architecture.
    pub fn uses_image_cache(self) -> bool {
        self == ArchitectureKind::Arch4DistributedLocalCache
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown architecture {0:?} (expected arch1, arch2, arch3 or arch4)")]
pub struct ParseArchitectureError(String);

impl FromStr for ArchitectureKind {
    type Err = ParseArchitectureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "arch1" => Ok(ArchitectureKind::Arch1CentralNoFrontend),
            "arch2" => Ok(ArchitectureKind::Arch2CentralWithFrontend),
            "arch3" => Ok(ArchitectureKind::Arch3DistributedRemoteCopy),
            "arch4" => Ok(ArchitectureKind::Arch4DistributedLocalCache),
            other => Err(ParseArchitectureError(other.to_string())),
        }
    }
}

/// Which physical pipe a transfer stage runs over. The driver binds the
/// route to a concrete engine link at execution time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransferRoute {
    /// The central storage array's disk spindle set.
    CentralClone,
    /// The shared front-end copy pipeline, fanning out to one node;
    /// subject to the node's admission limit.
    SshCopy { node: NodeId },
    /// The target node's local disk.
    LocalClone { node: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageDemand {
    Transfer {
        bytes_mib: f64,
        route: TransferRoute,
        cap_mib_s: Option<f64>,
    },
    Timed {
        seconds: f64,
    },
    /// Block until the image registry reports the template resident on
    /// the target node (instantaneous when the cache is warm).
    AcquireImage,
    /// Terminal marker: provisioning is done, boot-time
    /// contextualization takes over.
    BootHandoff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStage {
    pub label: &'static str,
    pub demand: StageDemand,
}

/// Where a VM's disk footprint is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePlace {
    CentralStorage,
    NodeDisk(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskClaim {
    pub place: StoragePlace,
    pub bytes_mib: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProvisionPlan {
    pub arch: ArchitectureKind,
    pub vm: VmId,
    pub node: NodeId,
    pub stages: Vec<PlanStage>,
    /// Charged when provisioning starts, released at shutdown.
    pub disk_claim: DiskClaim,
}

/// Calibration knobs the planner needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanParams {
    pub ssh_stream_rate_mib_s: f64,
    pub register_s: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error(
        "node {node} lacks free disk for the image: needs {needed_mib} MiB, {free_mib} MiB free"
    )]
    InsufficientNodeDisk {
        node: NodeId,
        needed_mib: f64,
        free_mib: f64,
    },
}

/// Builds the provisioning plan for one request. Pure: identical inputs
/// yield identical plans.
pub fn plan_provision(
    arch: ArchitectureKind,
    vm: VmId,
    template: &ImageTemplate,
    node: NodeId,
    node_free_disk_mib: f64,
    params: &PlanParams,
) -> Result<ProvisionPlan, PlanError> {
    let size = template.size_mib;
    let needs_node_disk = !arch.uses_central_storage();
    if needs_node_disk && node_free_disk_mib < size {
        return Err(PlanError::InsufficientNodeDisk {
            node,
            needed_mib: size,
            free_mib: node_free_disk_mib,
        });
    }

    let mut stages = Vec::new();
    match arch {
        ArchitectureKind::Arch1CentralNoFrontend | ArchitectureKind::Arch2CentralWithFrontend => {
            stages.push(PlanStage {
                label: "clone-on-central",
                demand: StageDemand::Transfer {
                    bytes_mib: size,
                    route: TransferRoute::CentralClone,
                    cap_mib_s: None,
                },
            });
            stages.push(PlanStage {
                label: "register-with-node",
                demand: StageDemand::Timed {
                    seconds: params.register_s,
                },
            });
        }
        ArchitectureKind::Arch3DistributedRemoteCopy => {
            stages.push(PlanStage {
                label: "ssh-copy",
                demand: StageDemand::Transfer {
                    bytes_mib: size,
                    route: TransferRoute::SshCopy { node },
                    cap_mib_s: Some(params.ssh_stream_rate_mib_s),
                },
            });
            stages.push(PlanStage {
                label: "register-with-node",
                demand: StageDemand::Timed {
                    seconds: params.register_s,
                },
            });
        }
        ArchitectureKind::Arch4DistributedLocalCache => {
            stages.push(PlanStage {
                label: "acquire-cached-image",
                demand: StageDemand::AcquireImage,
            });
            stages.push(PlanStage {
                label: "local-clone",
                demand: StageDemand::Transfer {
                    bytes_mib: size,
                    route: TransferRoute::LocalClone { node },
                    cap_mib_s: None,
                },
            });
        }
    }
    stages.push(PlanStage {
        label: "boot-handoff",
        demand: StageDemand::BootHandoff,
    });

    let disk_claim = DiskClaim {
        place: if arch.uses_central_storage() {
            StoragePlace::CentralStorage
        } else {
            StoragePlace::NodeDisk(node)
        },
        bytes_mib: size,
    };

    Ok(ProvisionPlan {
        arch,
        vm,
        node,
        stages,
        disk_claim,
    })
}

/// What shutting a VM down releases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CleanupAction {
    ReleaseDisk(DiskClaim),
    ReleaseMac,
}

#[derive(Debug, Error, PartialEq)]
pub enum ShutdownError {
    #[error("cannot shut down a VM in state {state} (must be running)")]
    NotRunning { state: LifecycleState },
}

/// Cleanup actions for a shutdown. The VM's own disk footprint goes away
/// in every architecture; the shared template cache (arch4) stays
/// resident on the node.
pub fn on_shutdown(
    arch: ArchitectureKind,
    state: LifecycleState,
    template: &ImageTemplate,
    node: NodeId,
) -> Result<Vec<CleanupAction>, ShutdownError> {
    if state != LifecycleState::Running {
        return Err(ShutdownError::NotRunning { state });
    }
    let place = if arch.uses_central_storage() {
        StoragePlace::CentralStorage
    } else {
        StoragePlace::NodeDisk(node)
    };
    Ok(vec![
        CleanupAction::ReleaseDisk(DiskClaim {
            place,
            bytes_mib: template.size_mib,
        }),
        CleanupAction::ReleaseMac,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::OsFamily;

    fn template(size_mib: f64) -> ImageTemplate {
        ImageTemplate {
            id: "wxp-base".into(),
            size_mib,
            os: OsFamily::WindowsXp,
            version: 1,
        }
    }

    fn params() -> PlanParams {
        PlanParams {
            ssh_stream_rate_mib_s: 7.0,
            register_s: 10.0,
        }
    }

    fn plan(arch: ArchitectureKind, size: f64, free: f64) -> Result<ProvisionPlan, PlanError> {
        plan_provision(arch, VmId(0), &template(size), NodeId(1), free, &params())
    }

    #[test]
    fn labels_round_trip_through_from_str() {
        for arch in ArchitectureKind::ALL {
            assert_eq!(arch.label().parse::<ArchitectureKind>().unwrap(), arch);
        }
        assert!("arch5".parse::<ArchitectureKind>().is_err());
        assert_eq!(
            "ARCH2".parse::<ArchitectureKind>().unwrap(),
            ArchitectureKind::Arch2CentralWithFrontend
        );
    }

    #[test]
    fn every_plan_ends_with_the_boot_handoff() {
        for arch in ArchitectureKind::ALL {
            let p = plan(arch, 8192.0, 512_000.0).unwrap();
            assert_eq!(
                p.stages.last().unwrap().demand,
                StageDemand::BootHandoff,
                "{arch}"
            );
        }
    }

    #[test]
    fn central_architectures_clone_on_the_storage_array() {
        for arch in [
            ArchitectureKind::Arch1CentralNoFrontend,
            ArchitectureKind::Arch2CentralWithFrontend,
        ] {
            let p = plan(arch, 8192.0, 0.0).unwrap(); // node disk not needed
            assert_eq!(p.stages[0].label, "clone-on-central");
            assert_eq!(
                p.stages[0].demand,
                StageDemand::Transfer {
                    bytes_mib: 8192.0,
                    route: TransferRoute::CentralClone,
                    cap_mib_s: None,
                }
            );
            assert_eq!(p.stages[1].label, "register-with-node");
            assert_eq!(p.disk_claim.place, StoragePlace::CentralStorage);
        }
    }

    #[test]
    fn remote_copy_is_capped_per_stream() {
        let p = plan(
            ArchitectureKind::Arch3DistributedRemoteCopy,
            8192.0,
            512_000.0,
        )
        .unwrap();
        match p.stages[0].demand {
            StageDemand::Transfer {
                bytes_mib,
                route,
                cap_mib_s,
            } => {
                assert_eq!(bytes_mib, 8192.0);
                assert_eq!(route, TransferRoute::SshCopy { node: NodeId(1) });
                // A lone capped stream moves size/cap: 8192/7 ≈ 1170.29 s.
                let secs = bytes_mib / cap_mib_s.unwrap();
                assert!((secs - 1170.285_714_285_714_2).abs() < 1e-9);
            }
            other => panic!("expected a transfer stage, got {other:?}"),
        }
        assert_eq!(p.disk_claim.place, StoragePlace::NodeDisk(NodeId(1)));
    }

    #[test]
    fn cached_architecture_never_plans_a_network_transfer() {
        let p = plan(
            ArchitectureKind::Arch4DistributedLocalCache,
            8192.0,
            512_000.0,
        )
        .unwrap();
        let labels: Vec<&str> = p.stages.iter().map(|s| s.label).collect();
        assert_eq!(
            labels,
            vec!["acquire-cached-image", "local-clone", "boot-handoff"]
        );
        for stage in &p.stages {
            if let StageDemand::Transfer { route, .. } = stage.demand {
                assert!(
                    matches!(route, TransferRoute::LocalClone { .. }),
                    "unexpected remote transfer in plan: {stage:?}"
                );
            }
        }
    }

    #[test]
    fn zero_byte_image_still_yields_a_well_formed_plan() {
        let p = plan(ArchitectureKind::Arch1CentralNoFrontend, 0.0, 0.0).unwrap();
        assert_eq!(p.stages.len(), 3);
        match p.stages[0].demand {
            StageDemand::Transfer { bytes_mib, .. } => assert_eq!(bytes_mib, 0.0),
            _ => panic!("first stage should be the clone transfer"),
        }
    }

    #[test]
    fn node_disk_shortfall_is_a_placement_error() {
        let err = plan(ArchitectureKind::Arch3DistributedRemoteCopy, 8192.0, 100.0).unwrap_err();
        assert_eq!(
            err,
            PlanError::InsufficientNodeDisk {
                node: NodeId(1),
                needed_mib: 8192.0,
                free_mib: 100.0,
            }
        );
        // Central architectures do not consume node disk at all.
        assert!(plan(ArchitectureKind::Arch1CentralNoFrontend, 8192.0, 0.0).is_ok());
    }

    #[test]
    fn planning_is_pure() {
        for arch in ArchitectureKind::ALL {
            let a = plan(arch, 8192.0, 512_000.0).unwrap();
            let b = plan(arch, 8192.0, 512_000.0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shutdown_releases_the_vm_footprint_and_its_mac() {
        let t = template(8192.0);
        let acts = on_shutdown(
            ArchitectureKind::Arch3DistributedRemoteCopy,
            LifecycleState::Running,
            &t,
            NodeId(2),
        )
        .unwrap();
        assert_eq!(
            acts,
            vec![
                CleanupAction::ReleaseDisk(DiskClaim {
                    place: StoragePlace::NodeDisk(NodeId(2)),
                    bytes_mib: 8192.0,
                }),
                CleanupAction::ReleaseMac,
            ]
        );
        let central = on_shutdown(
            ArchitectureKind::Arch2CentralWithFrontend,
            LifecycleState::Running,
            &t,
            NodeId(2),
        )
        .unwrap();
        assert!(matches!(
            central[0],
            CleanupAction::ReleaseDisk(DiskClaim {
                place: StoragePlace::CentralStorage,
                ..
            })
        ));
    }

    #[test]
    fn cached_template_survives_a_shutdown() {
        // arch4 releases exactly the VM's clone bytes; the shared cache
        // entry is owned by the registry and is not in the cleanup list.
        let t = template(8192.0);
        let acts = on_shutdown(
            ArchitectureKind::Arch4DistributedLocalCache,
            LifecycleState::Running,
            &t,
            NodeId(3),
        )
        .unwrap();
        let released: f64 = acts
            .iter()
            .map(|a| match a {
                CleanupAction::ReleaseDisk(c) => c.bytes_mib,
                CleanupAction::ReleaseMac => 0.0,
            })
            .sum();
        assert_eq!(released, 8192.0);
    }

    #[test]
    fn shutdown_requires_a_running_vm() {
        let t = template(8192.0);
        for state in [LifecycleState::Booting, LifecycleState::ShutDown] {
            let err = on_shutdown(
                ArchitectureKind::Arch1CentralNoFrontend,
                state,
                &t,
                NodeId(1),
            )
            .unwrap_err();
            assert_eq!(err, ShutdownError::NotRunning { state });
        }
    }
}
