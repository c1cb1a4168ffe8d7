//! Static descriptions of the simulated cluster: hosts, shared storage,
//! image templates, the MAC address pool and incoming VM requests.
//!
//! Everything in this module is plain data plus validation. Units are
//! MiB for sizes, MiB/s for rates and seconds for durations throughout
//! the crate.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a node inside the cluster (position in `ClusterSpec::nodes`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Index of a template inside the experiment's template list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TemplateId(pub usize);

/// Index of a VM request within one simulation run (0-based request order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VmId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0 + 1)
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm{:02}", self.0 + 1)
    }
}

/// Guest OS family; drives which contextualization stages a VM visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsFamily {
    Linux,
    WindowsXp,
}

impl fmt::Display for OsFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OsFamily::Linux => write!(f, "linux"),
            OsFamily::WindowsXp => write!(f, "windows_xp"),
        }
    }
}

/// A master VM image that requests are cloned from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTemplate {
    /// Opaque identifier, unique within the experiment.
    pub id: String,
    /// Image size in MiB; the number of bytes every clone or copy moves.
    pub size_mib: f64,
    /// Guest OS family of the image.
    pub os: OsFamily,
    /// Monotonically increasing template version (starts at 1).
    pub version: u32,
}

/// One hypervisor host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    /// Opaque identifier, unique within the cluster.
    pub id: String,
    /// Local disk capacity in MiB available for images and clones.
    pub disk_capacity_mib: f64,
    /// Network interface bandwidth in MiB/s.
    pub nic_mib_s: f64,
    /// Aggregate throughput of the node's local disk in MiB/s.
    pub local_disk_mib_s: f64,
    /// How many incoming remote image copies the node accepts at once;
    /// further copies queue at the node.
    pub max_concurrent_receives: u32,
    /// Installed RAM in MiB. Carried for completeness; memory pressure is
    /// not part of the model.
    pub ram_mib: f64,
}

/// The shared storage backend used by the centralized architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedStorageSpec {
    /// Aggregate clone/copy throughput of the storage disks in MiB/s.
    pub disk_rate_mib_s: f64,
    /// Network interface bandwidth of the storage server in MiB/s.
    pub nic_mib_s: f64,
    /// True when the storage server doubles as the cloud front end, in
    /// which case its effective capacities are derated by the configured
    /// colocation factor.
    pub colocated_with_frontend: bool,
}

/// A six-byte MAC address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

/// Where a request should be placed.
#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    /// Pin the VM to one node.
    Node(NodeId),
    /// Let the scheduler pick (round-robin over nodes by request order).
    SchedulerChosen,
}

/// One incoming VM provisioning request.
#[derive(Debug, Clone, PartialEq)]
pub struct VmRequest {
    pub id: VmId,
    pub template: TemplateId,
    /// Arrival time in seconds from simulation start.
    pub arrival_s: f64,
    pub placement: Placement,
}

#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("cluster has no nodes")]
    EmptyCluster,
    #[error("duplicate node id {0:?}")]
    DuplicateNodeId(String),
    #[error("duplicate template id {0:?}")]
    DuplicateTemplateId(String),
    #[error("no image templates declared")]
    NoTemplates,
    #[error("node {node:?}: field {field} must be positive, got {value}")]
    NonPositiveNodeField {
        node: String,
        field: &'static str,
        value: f64,
    },
    #[error("shared storage: field {field} must be positive, got {value}")]
    NonPositiveStorageField { field: &'static str, value: f64 },
    #[error("template {id:?}: size_mib must be non-negative, got {size}")]
    NegativeTemplateSize { id: String, size: f64 },
    #[error("template {id:?}: version must be >= 1")]
    ZeroTemplateVersion { id: String },
    #[error("node {node:?}: max_concurrent_receives must be >= 1")]
    ZeroReceiveSlots { node: String },
    #[error("mac pool is empty")]
    EmptyMacPool,
    #[error("duplicate mac address {0} in pool")]
    DuplicateMac(MacAddr),
    #[error("duplicate hostname {0:?} in pool")]
    DuplicateHostname(String),
}

/// The full static cluster description for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub nodes: Vec<NodeSpec>,
    pub storage: SharedStorageSpec,
    pub mac_entries: Vec<MacPoolEntry>,
}

/// One pre-registered (MAC address, hostname) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MacPoolEntry {
    pub mac: MacAddr,
    pub hostname: String,
}

impl ClusterSpec {
    /// Checks structural invariants and returns the spec unchanged if they
    /// hold. Validation is idempotent: a spec that passed once passes again.
    pub fn validate(self) -> Result<ClusterSpec, ValidationError> {
        if self.nodes.is_empty() {
            return Err(ValidationError::EmptyCluster);
        }
        let mut seen = BTreeSet::new();
        for node in &self.nodes {
            if !seen.insert(node.id.clone()) {
                return Err(ValidationError::DuplicateNodeId(node.id.clone()));
            }
            for (field, value) in [
                ("disk_capacity_mib", node.disk_capacity_mib),
                ("nic_mib_s", node.nic_mib_s),
                ("local_disk_mib_s", node.local_disk_mib_s),
                ("ram_mib", node.ram_mib),
            ] {
                if !(value > 0.0) {
                    return Err(ValidationError::NonPositiveNodeField {
                        node: node.id.clone(),
                        field,
                        value,
                    });
                }
            }
            if node.max_concurrent_receives == 0 {
                return Err(ValidationError::ZeroReceiveSlots {
                    node: node.id.clone(),
                });
            }
        }
        for (field, value) in [
            ("disk_rate_mib_s", self.storage.disk_rate_mib_s),
            ("nic_mib_s", self.storage.nic_mib_s),
        ] {
            if !(value > 0.0) {
                return Err(ValidationError::NonPositiveStorageField { field, value });
            }
        }
        if self.mac_entries.is_empty() {
            return Err(ValidationError::EmptyMacPool);
        }
        let mut macs = BTreeSet::new();
        let mut names = BTreeSet::new();
        for entry in &self.mac_entries {
            if !macs.insert(entry.mac) {
                return Err(ValidationError::DuplicateMac(entry.mac));
            }
            if !names.insert(entry.hostname.clone()) {
                return Err(ValidationError::DuplicateHostname(entry.hostname.clone()));
            }
        }
        Ok(self)
    }
}

/// Validates a template list (unique ids, sane sizes and versions).
pub fn validate_templates(templates: &[ImageTemplate]) -> Result<(), ValidationError> {
    if templates.is_empty() {
        return Err(ValidationError::NoTemplates);
    }
    let mut seen = BTreeSet::new();
    for t in templates {
        if !seen.insert(t.id.clone()) {
            return Err(ValidationError::DuplicateTemplateId(t.id.clone()));
        }
        if t.size_mib < 0.0 {
            return Err(ValidationError::NegativeTemplateSize {
                id: t.id.clone(),
                size: t.size_mib,
            });
        }
        if t.version == 0 {
            return Err(ValidationError::ZeroTemplateVersion { id: t.id.clone() });
        }
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
#[error("node {node} disk full: requested {requested_mib} MiB with {free_mib} MiB free")]
pub struct DiskFullError {
    pub node: NodeId,
    pub requested_mib: f64,
    pub free_mib: f64,
}

/// Byte-level disk accounting across node disks and central storage.
///
/// The ledger deliberately allows illegal states to be *recorded* (e.g. a
/// double release driving usage negative) so that [`DiskLedger::audit`]
/// can report conservation violations instead of masking them.
#[derive(Debug, Clone)]
pub struct DiskLedger {
    node_capacity_mib: Vec<f64>,
    node_used_mib: Vec<f64>,
    central_used_mib: f64,
}

impl DiskLedger {
    pub fn new(nodes: &[NodeSpec]) -> DiskLedger {
        DiskLedger {
            node_capacity_mib: nodes.iter().map(|n| n.disk_capacity_mib).collect(),
            node_used_mib: vec![0.0; nodes.len()],
            central_used_mib: 0.0,
        }
    }

    pub fn node_free_mib(&self, node: NodeId) -> f64 {
        self.node_capacity_mib[node.0] - self.node_used_mib[node.0]
    }

    pub fn node_used_mib(&self, node: NodeId) -> f64 {
        self.node_used_mib[node.0]
    }

    pub fn central_used_mib(&self) -> f64 {
        self.central_used_mib
    }

    /// Reserves bytes on a node disk, refusing to oversubscribe.
    pub fn try_reserve_node(&mut self, node: NodeId, bytes_mib: f64) -> Result<(), DiskFullError> {
        let free = self.node_free_mib(node);
        if bytes_mib > free {
            return Err(DiskFullError {
                node,
                requested_mib: bytes_mib,
                free_mib: free,
            });
        }
        self.node_used_mib[node.0] += bytes_mib;
        Ok(())
    }

    pub fn release_node(&mut self, node: NodeId, bytes_mib: f64) {
        self.node_used_mib[node.0] -= bytes_mib;
    }

    /// Central storage is modeled without a capacity bound; reservation
    /// tracks usage for the conservation audit only.
    pub fn reserve_central(&mut self, bytes_mib: f64) {
        self.central_used_mib += bytes_mib;
    }

    pub fn release_central(&mut self, bytes_mib: f64) {
        self.central_used_mib -= bytes_mib;
    }

    /// Conservation violations, if any: negative usage anywhere, or node
    /// usage above capacity. A small epsilon absorbs float dust from
    /// repeated reserve/release cycles.
    pub fn audit(&self) -> Vec<String> {
        const EPS: f64 = 1e-6;
        let mut violations = Vec::new();
        for (i, (&used, &cap)) in self
            .node_used_mib
            .iter()
            .zip(&self.node_capacity_mib)
            .enumerate()
        {
            if used < -EPS {
                violations.push(format!(
                    "node {} disk usage negative: {used} MiB",
                    NodeId(i)
                ));
            }
            if used > cap + EPS {
                violations.push(format!(
                    "node {} disk over capacity: {used} of {cap} MiB",
                    NodeId(i)
                ));
            }
        }
        if self.central_used_mib < -EPS {
            violations.push(format!(
                "central storage usage negative: {} MiB",
                self.central_used_mib
            ));
        }
        violations
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MacPoolError {
    #[error("mac pool exhausted")]
    Exhausted,
    #[error("mac {0} is not a member of the pool")]
    UnknownMac(MacAddr),
    #[error("mac {0} is not currently allocated")]
    NotAllocated(MacAddr),
    #[error("mac {0} is already allocated")]
    AlreadyAllocated(MacAddr),
}

/// Runtime allocator over the pre-registered (MAC, hostname) pairs.
///
/// Allocation order is deterministic: the free entry with the lowest pool
/// position wins, so releasing and re-allocating yields the same address.
#[derive(Debug, Clone)]
pub struct MacPool {
    entries: Vec<MacPoolEntry>,
    allocated: Vec<Option<VmId>>,
}

impl MacPool {
    pub fn new(entries: Vec<MacPoolEntry>) -> MacPool {
        let allocated = vec![None; entries.len()];
        MacPool { entries, allocated }
    }

    /// Builds the default pool: `size` locally-administered addresses
    /// 02:00:00:00:00:01.. paired with hostnames vmtest01...
    pub fn default_entries(size: usize) -> Vec<MacPoolEntry> {
        (0..size)
            .map(|i| {
                let n = (i + 1) as u64;
                MacPoolEntry {
                    mac: MacAddr([0x02, 0, 0, 0, ((n >> 8) & 0xff) as u8, (n & 0xff) as u8]),
                    hostname: format!("vmtest{:02}", i + 1),
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn free_count(&self) -> usize {
        self.allocated.iter().filter(|a| a.is_none()).count()
    }

    pub fn allocated_count(&self) -> usize {
        self.len() - self.free_count()
    }

    /// Allocates the lowest-ordered free entry to `vm`.
    pub fn allocate(&mut self, vm: VmId) -> Result<MacAddr, MacPoolError> {
        for (i, slot) in self.allocated.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(vm);
                return Ok(self.entries[i].mac);
            }
        }
        Err(MacPoolError::Exhausted)
    }

    /// Returns a previously allocated address to the pool.
    pub fn release(&mut self, mac: MacAddr) -> Result<(), MacPoolError> {
        let idx = self.index_of(mac).ok_or(MacPoolError::UnknownMac(mac))?;
        if self.allocated[idx].is_none() {
            return Err(MacPoolError::NotAllocated(mac));
        }
        self.allocated[idx] = None;
        Ok(())
    }

    /// Resolves the hostname registered for a pool address.
    pub fn lookup_hostname(&self, mac: MacAddr) -> Result<&str, MacPoolError> {
        self.index_of(mac)
            .map(|i| self.entries[i].hostname.as_str())
            .ok_or(MacPoolError::UnknownMac(mac))
    }

    /// The VM currently holding `mac`, if any.
    pub fn holder(&self, mac: MacAddr) -> Option<VmId> {
        self.index_of(mac).and_then(|i| self.allocated[i])
    }

    fn index_of(&self, mac: MacAddr) -> Option<usize> {
        self.entries.iter().position(|e| e.mac == mac)
    }

    /// Conservation check: every entry is either free or held by exactly
    /// one VM, and no two live VMs share an entry. Used by audits.
    pub fn conserved(&self) -> bool {
        let mut holders = BTreeSet::new();
        for slot in self.allocated.iter().flatten() {
            if !holders.insert(*slot) {
                return false;
            }
        }
        true
    }
}
