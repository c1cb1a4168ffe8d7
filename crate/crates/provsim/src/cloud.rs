//! The simulation driver: one `CloudSim` owns the event core, the MAC
//! pool, the disk ledger, the image registry and every VM record, and
//! advances them all by handling events until the cloud goes idle.
//!
//! Provisioning follows the architecture's plan stage by stage; the final
//! `boot-handoff` stage switches the VM over to the contextualization
//! state machine (boot, MAC lookup, rename, optional SID reset, reboot).

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{
    on_shutdown, plan_provision, ArchitectureKind, CleanupAction, PlanParams, ProvisionPlan,
    ShutdownError, StageDemand, StoragePlace, TransferRoute,
};
use crate::domain::{
    validate_templates, ClusterSpec, DiskLedger, ImageTemplate, MacAddr, MacPool, MacPoolError,
    NodeId, OsFamily, Placement, TemplateId, ValidationError, VmId, VmRequest,
};
use crate::engine::{
    Engine, Event, EventKind, EventPayload, JobId, JobOwner, LinkId, SimError, StageRef,
};
use crate::image::{Acquire, ImageError, ImageManager};
use crate::lifecycle::{boot_next, stage_duration, LifecycleState, StageTable};

/// Calibration knobs binding the architectures to concrete capacities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// Throughput ceiling of a single SSH image copy stream (MiB/s).
    pub ssh_stream_rate_mib_s: f64,
    /// Aggregate throughput of the front end's outbound copy pipeline
    /// (MiB/s); every in-flight SSH copy shares it fairly.
    pub frontend_transfer_rate_mib_s: f64,
    /// Fixed time to register a freshly cloned VM with its node (s).
    pub register_s: f64,
    /// Capacity multiplier on shared storage when the front end runs on
    /// the same box (the colocated variant).
    pub colocation_factor: f64,
}

impl Default for Calibration {
    fn default() -> Calibration {
        Calibration {
            ssh_stream_rate_mib_s: 7.0,
            frontend_transfer_rate_mib_s: 18.0,
            register_s: 10.0,
            colocation_factor: 0.92,
        }
    }
}

/// Whether template caches are already distributed at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmup {
    /// Caches warm before the first request (background distribution ran
    /// ahead of the experiment).
    Full,
    /// Caches empty at t = 0; the fan-out syncs start with the clock.
    None,
}

impl fmt::Display for Warmup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Warmup::Full => "full",
            Warmup::None => "none",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown warmup mode {0:?} (expected full or none)")]
pub struct ParseWarmupError(String);

impl FromStr for Warmup {
    type Err = ParseWarmupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Warmup::Full),
            "none" => Ok(Warmup::None),
            other => Err(ParseWarmupError(other.to_string())),
        }
    }
}

/// Everything a single simulation run needs, fully resolved.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub arch: ArchitectureKind,
    pub cluster: ClusterSpec,
    pub templates: Vec<ImageTemplate>,
    pub stages: StageTable,
    pub calibration: Calibration,
    pub jitter_sigma: f64,
    pub seed: u64,
    pub warmup: Warmup,
}

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Shutdown(#[from] ShutdownError),
    #[error("unknown vm {0:?}")]
    UnknownVm(VmId),
    #[error("request ids must be dense and ordered: expected VmId({expected}), got {got:?}")]
    RequestOutOfOrder { expected: usize, got: VmId },
    #[error("request {vm:?} references unknown template index {template}")]
    UnknownTemplate { vm: VmId, template: usize },
    #[error("request {vm:?} targets unknown node index {node}")]
    UnknownNode { vm: VmId, node: usize },
}

/// One line of the chronological simulation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time_s: f64,
    /// Snake_case event kind, e.g. `arrival`, `ssh_queued`, `running`.
    pub kind: &'static str,
    pub vm: Option<VmId>,
    pub node: Option<NodeId>,
    pub detail: String,
}

/// Terminal record for one VM after a run.
#[derive(Debug, Clone, PartialEq)]
pub struct VmOutcome {
    pub vm: VmId,
    pub node: NodeId,
    pub arrival_s: f64,
    /// Time the VM reached `Running`; `None` for failed or stalled VMs.
    pub running_s: Option<f64>,
    pub failed: bool,
    pub fail_reason: Option<String>,
    pub hostname: Option<String>,
    pub mac: Option<MacAddr>,
    /// Entry time of every lifecycle state the VM visited, in order.
    pub stage_log: Vec<(LifecycleState, f64)>,
}

/// Everything a finished (or quiescent) run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub per_vm: Vec<VmOutcome>,
    pub trace: Vec<TraceEvent>,
    pub final_clock_s: f64,
    pub audit_violations: Vec<String>,
    pub image_warnings: Vec<String>,
}

#[derive(Debug)]
struct VmRecord {
    template: TemplateId,
    node: NodeId,
    arrival_s: f64,
    os: OsFamily,
    state: LifecycleState,
    plan: Option<ProvisionPlan>,
    cursor: usize,
    mac: Option<MacAddr>,
    hostname: Option<String>,
    stage_log: Vec<(LifecycleState, f64)>,
    running_s: Option<f64>,
    failed: bool,
    fail_reason: Option<String>,
    live_job: Option<JobId>,
    disk_claim_applied: bool,
}

/// Per-node admission control for incoming SSH copies.
#[derive(Debug, Default)]
struct Admission {
    active: u32,
    queue: VecDeque<VmId>,
}

fn snake_label(state: LifecycleState) -> &'static str {
    match state {
        LifecycleState::Queued => "queued",
        LifecycleState::Provisioning => "provisioning",
        LifecycleState::Booting => "booting",
        LifecycleState::MacLookup => "mac_lookup",
        LifecycleState::Renaming => "renaming",
        LifecycleState::SidReset => "sid_reset",
        LifecycleState::Rebooting => "rebooting",
        LifecycleState::Running => "running",
        LifecycleState::ShutDown => "shutdown",
    }
}

#[derive(Debug)]
pub struct CloudSim {
    engine: Engine,
    arch: ArchitectureKind,
    cluster: ClusterSpec,
    templates: Vec<ImageTemplate>,
    stages: StageTable,
    calibration: Calibration,
    jitter_sigma: f64,
    rng: ChaCha8Rng,
    mac_pool: MacPool,
    ledger: DiskLedger,
    images: ImageManager,
    vms: Vec<VmRecord>,
    central_disk: LinkId,
    frontend: LinkId,
    node_disks: Vec<LinkId>,
    admission: Vec<Admission>,
    pending_macs: VecDeque<VmId>,
    injected_lookup_failures: BTreeSet<VmId>,
    trace: Vec<TraceEvent>,
    violations: Vec<String>,
    seen_violations: BTreeSet<String>,
}

impl CloudSim {
    pub fn new(setup: RunSetup) -> Result<CloudSim, CloudError> {
        let cluster = setup.cluster.validate()?;
        validate_templates(&setup.templates)?;

        let mut engine = Engine::new();
        // The colocated variant pays the co-location penalty on its
        // storage throughput; the dedicated variant does not.
        let central_rate = if setup.arch == ArchitectureKind::Arch2CentralWithFrontend {
            cluster.storage.disk_rate_mib_s * setup.calibration.colocation_factor
        } else {
            cluster.storage.disk_rate_mib_s
        };
        let central_disk = engine.add_link("central-disk", central_rate);
        let frontend = engine.add_link(
            "frontend-copy",
            setup.calibration.frontend_transfer_rate_mib_s,
        );
        let mut node_nics = Vec::new();
        let mut node_disks = Vec::new();
        for (i, node) in cluster.nodes.iter().enumerate() {
            node_nics.push((
                NodeId(i),
                engine.add_link(format!("nic-{}", node.id), node.nic_mib_s),
            ));
            node_disks.push(engine.add_link(format!("disk-{}", node.id), node.local_disk_mib_s));
        }

        let mut ledger = DiskLedger::new(&cluster.nodes);
        let mut images = ImageManager::new(node_nics);
        if setup.arch.uses_image_cache() {
            for (i, template) in setup.templates.iter().enumerate() {
                match setup.warmup {
                    Warmup::Full => {
                        images.prewarm_template(&mut ledger, TemplateId(i), template)?
                    }
                    Warmup::None => images.register_template(
                        &mut engine,
                        &mut ledger,
                        TemplateId(i),
                        template,
                    )?,
                }
            }
        }

        let admission = cluster.nodes.iter().map(|_| Admission::default()).collect();
        let mac_pool = MacPool::new(cluster.mac_entries.clone());
        Ok(CloudSim {
            engine,
            arch: setup.arch,
            cluster,
            templates: setup.templates,
            stages: setup.stages,
            calibration: setup.calibration,
            jitter_sigma: setup.jitter_sigma,
            rng: ChaCha8Rng::seed_from_u64(setup.seed),
            mac_pool,
            ledger,
            images,
            vms: Vec::new(),
            central_disk,
            frontend,
            node_disks,
            admission,
            pending_macs: VecDeque::new(),
            injected_lookup_failures: BTreeSet::new(),
            trace: Vec::new(),
            violations: Vec::new(),
            seen_violations: BTreeSet::new(),
        })
    }

    pub fn clock(&self) -> f64 {
        self.engine.clock()
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn images(&self) -> &ImageManager {
        &self.images
    }

    pub fn ledger(&self) -> &DiskLedger {
        &self.ledger
    }

    pub fn mac_pool(&self) -> &MacPool {
        &self.mac_pool
    }

    pub fn vm_state(&self, vm: VmId) -> Option<LifecycleState> {
        self.vms.get(vm.0).map(|r| r.state)
    }

    /// Fault injection: the named VM's hostname lookup will fail when its
    /// MAC-lookup stage completes, driving it into the terminal failed
    /// record. For exercising failure handling and metrics.
    pub fn inject_lookup_failure(&mut self, vm: VmId) {
        self.injected_lookup_failures.insert(vm);
    }

    /// Bumps a registered template to `new_version` mid-run (cache
    /// invalidation plus resync fan-out).
    pub fn update_template(
        &mut self,
        template: TemplateId,
        new_version: u32,
    ) -> Result<(), ImageError> {
        self.images.handle_template_update(
            &mut self.engine,
            &mut self.ledger,
            template,
            new_version,
        )
    }

    /// Registers requests and schedules their arrivals. Ids must continue
    /// the sequence of previously submitted requests.
    pub fn submit(&mut self, requests: &[VmRequest]) -> Result<(), CloudError> {
        for req in requests {
            if req.id.0 != self.vms.len() {
                return Err(CloudError::RequestOutOfOrder {
                    expected: self.vms.len(),
                    got: req.id,
                });
            }
            let template =
                self.templates
                    .get(req.template.0)
                    .ok_or(CloudError::UnknownTemplate {
                        vm: req.id,
                        template: req.template.0,
                    })?;
            let node = match req.placement {
                Placement::Node(n) => {
                    if n.0 >= self.cluster.nodes.len() {
                        return Err(CloudError::UnknownNode {
                            vm: req.id,
                            node: n.0,
                        });
                    }
                    n
                }
                Placement::SchedulerChosen => NodeId(req.id.0 % self.cluster.nodes.len()),
            };
            self.vms.push(VmRecord {
                template: req.template,
                node,
                arrival_s: req.arrival_s,
                os: template.os,
                state: LifecycleState::Queued,
                plan: None,
                cursor: 0,
                mac: None,
                hostname: None,
                stage_log: Vec::new(),
                running_s: None,
                failed: false,
                fail_reason: None,
                live_job: None,
                disk_claim_applied: false,
            });
            self.engine
                .schedule(req.arrival_s, EventKind::RequestArrival { vm: req.id })?;
        }
        Ok(())
    }

    /// Drains the event queue, handling every event and auditing the
    /// resource invariants after each one.
    pub fn run_until_idle(&mut self) -> Result<RunOutcome, CloudError> {
        while let Some(ev) = self.engine.next_event()? {
            let t = ev.time;
            self.handle(ev)?;
            self.audit_now(t);
        }
        Ok(self.outcome())
    }

    /// Snapshot of the run results at the current instant.
    pub fn outcome(&self) -> RunOutcome {
        RunOutcome {
            per_vm: self
                .vms
                .iter()
                .enumerate()
                .map(|(i, rec)| VmOutcome {
                    vm: VmId(i),
                    node: rec.node,
                    arrival_s: rec.arrival_s,
                    running_s: rec.running_s,
                    failed: rec.failed,
                    fail_reason: rec.fail_reason.clone(),
                    hostname: rec.hostname.clone(),
                    mac: rec.mac,
                    stage_log: rec.stage_log.clone(),
                })
                .collect(),
            trace: self.trace.clone(),
            final_clock_s: self.engine.clock(),
            audit_violations: self.violations.clone(),
            image_warnings: self.images.warnings().to_vec(),
        }
    }

    /// Powers off a `Running` VM at the current clock, releasing its disk
    /// footprint and MAC.
    pub fn shutdown_vm(&mut self, vm: VmId) -> Result<(), CloudError> {
        let rec = self.vms.get(vm.0).ok_or(CloudError::UnknownVm(vm))?;
        let t = self.engine.clock();
        let actions = on_shutdown(
            self.arch,
            rec.state,
            &self.templates[rec.template.0],
            rec.node,
        )?;
        for action in actions {
            match action {
                CleanupAction::ReleaseDisk(claim) => {
                    match claim.place {
                        StoragePlace::CentralStorage => {
                            self.ledger.release_central(claim.bytes_mib)
                        }
                        StoragePlace::NodeDisk(n) => self.ledger.release_node(n, claim.bytes_mib),
                    }
                    self.vms[vm.0].disk_claim_applied = false;
                }
                CleanupAction::ReleaseMac => self.release_mac_of(vm, t),
            }
        }
        self.enter_state(vm, LifecycleState::ShutDown, t);
        self.pump_pending_macs(t)?;
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<(), CloudError> {
        let t = ev.time;
        match ev.payload {
            EventPayload::RequestArrival { vm } => self.on_arrival(vm, t),
            EventPayload::StageComplete { vm, stage } => match stage {
                StageRef::Plan { index } => self.on_plan_stage_done(vm, index, t),
                StageRef::Context { state } => self.on_context_stage_done(vm, state, t),
            },
            EventPayload::TransferComplete { owner, .. } => match owner {
                JobOwner::VmStage { vm } => self.on_transfer_done(vm, t),
                JobOwner::Sync { .. } => unreachable!("sync owner on a foreground completion"),
            },
            EventPayload::SyncComplete { owner, .. } => match owner {
                JobOwner::Sync {
                    node,
                    template,
                    version,
                } => self.on_sync_done(node, template, version, t),
                JobOwner::VmStage { .. } => {
                    unreachable!("foreground owner on a sync completion")
                }
            },
        }
    }

    fn on_arrival(&mut self, vm: VmId, t: f64) -> Result<(), CloudError> {
        let node = self.vms[vm.0].node;
        self.vms[vm.0].stage_log.push((LifecycleState::Queued, t));
        self.push_trace(t, "arrival", Some(vm), Some(node), String::new());
        self.begin_provisioning(vm, t)
    }

    /// Allocates a MAC, builds the plan, charges the disk claim and
    /// starts executing. Queues the request instead when no MAC is free.
    fn begin_provisioning(&mut self, vm: VmId, t: f64) -> Result<(), CloudError> {
        let node = self.vms[vm.0].node;
        let mac = match self.mac_pool.allocate(vm) {
            Ok(mac) => mac,
            Err(MacPoolError::Exhausted) => {
                self.pending_macs.push_back(vm);
                self.push_trace(t, "mac_wait", Some(vm), Some(node), String::new());
                return Ok(());
            }
            Err(other) => {
                self.note_violation(t, format!("mac allocation for {vm}: {other}"));
                return Ok(());
            }
        };
        self.vms[vm.0].mac = Some(mac);
        self.push_trace(t, "mac_assigned", Some(vm), Some(node), mac.to_string());

        let template = &self.templates[self.vms[vm.0].template.0];
        let params = PlanParams {
            ssh_stream_rate_mib_s: self.calibration.ssh_stream_rate_mib_s,
            register_s: self.calibration.register_s,
        };
        let plan = match plan_provision(
            self.arch,
            vm,
            template,
            node,
            self.ledger.node_free_mib(node),
            &params,
        ) {
            Ok(plan) => plan,
            Err(err) => {
                self.fail_vm(vm, t, format!("placement failed: {err}"));
                return Ok(());
            }
        };
        match plan.disk_claim.place {
            StoragePlace::CentralStorage => self.ledger.reserve_central(plan.disk_claim.bytes_mib),
            StoragePlace::NodeDisk(n) => {
                // plan_provision verified the headroom in this same instant.
                self.ledger
                    .try_reserve_node(n, plan.disk_claim.bytes_mib)
                    .expect("planner checked node headroom");
            }
        }
        self.vms[vm.0].disk_claim_applied = true;
        self.vms[vm.0].plan = Some(plan);
        self.vms[vm.0].cursor = 0;
        self.enter_state(vm, LifecycleState::Provisioning, t);
        self.advance_plan(vm, t)
    }

    /// Executes plan stages from the cursor until one blocks (transfer in
    /// flight, timer pending, image sync wait) or hands off to boot.
    fn advance_plan(&mut self, vm: VmId, t: f64) -> Result<(), CloudError> {
        loop {
            let (cursor, node, template) = {
                let rec = &self.vms[vm.0];
                (rec.cursor, rec.node, rec.template)
            };
            let stage = self.vms[vm.0].plan.as_ref().expect("plan set").stages[cursor];
            match stage.demand {
                StageDemand::Timed { seconds } => {
                    self.push_trace(t, "stage_start", Some(vm), Some(node), stage.label.into());
                    self.engine.schedule(
                        t + seconds,
                        EventKind::StageComplete {
                            vm,
                            stage: StageRef::Plan { index: cursor },
                        },
                    )?;
                    return Ok(());
                }
                StageDemand::Transfer {
                    bytes_mib,
                    route,
                    cap_mib_s,
                } => {
                    match route {
                        TransferRoute::CentralClone => {
                            let job = self.engine.start_transfer(
                                self.central_disk,
                                bytes_mib,
                                cap_mib_s,
                                JobOwner::VmStage { vm },
                            )?;
                            self.vms[vm.0].live_job = Some(job);
                            self.push_trace(
                                t,
                                "stage_start",
                                Some(vm),
                                Some(node),
                                stage.label.into(),
                            );
                        }
                        TransferRoute::LocalClone { node: n } => {
                            let job = self.engine.start_transfer(
                                self.node_disks[n.0],
                                bytes_mib,
                                cap_mib_s,
                                JobOwner::VmStage { vm },
                            )?;
                            self.vms[vm.0].live_job = Some(job);
                            self.push_trace(
                                t,
                                "stage_start",
                                Some(vm),
                                Some(n),
                                stage.label.into(),
                            );
                        }
                        TransferRoute::SshCopy { node: n } => {
                            let max = self.cluster.nodes[n.0].max_concurrent_receives;
                            if self.admission[n.0].active < max {
                                self.admit_ssh_copy(vm, n, bytes_mib, cap_mib_s, t)?;
                            } else {
                                self.admission[n.0].queue.push_back(vm);
                                self.push_trace(t, "ssh_queued", Some(vm), Some(n), String::new());
                            }
                        }
                    }
                    return Ok(());
                }
                StageDemand::AcquireImage => {
                    match self.images.acquire_image(
                        &mut self.engine,
                        &mut self.ledger,
                        node,
                        template,
                        vm,
                    ) {
                        Ok(Acquire::Ready) => {
                            self.push_trace(t, "image_ready", Some(vm), Some(node), String::new());
                            self.vms[vm.0].cursor += 1;
                        }
                        Ok(Acquire::Wait) => {
                            self.push_trace(t, "image_wait", Some(vm), Some(node), String::new());
                            return Ok(());
                        }
                        Err(ImageError::Sim(e)) => return Err(e.into()),
                        Err(err) => {
                            self.fail_vm(vm, t, format!("image acquisition failed: {err}"));
                            return Ok(());
                        }
                    }
                }
                StageDemand::BootHandoff => {
                    return self.enter_context_stage(vm, LifecycleState::Booting, t);
                }
            }
        }
    }

    fn admit_ssh_copy(
        &mut self,
        vm: VmId,
        node: NodeId,
        bytes_mib: f64,
        cap_mib_s: Option<f64>,
        t: f64,
    ) -> Result<(), CloudError> {
        self.admission[node.0].active += 1;
        let job = self.engine.start_transfer(
            self.frontend,
            bytes_mib,
            cap_mib_s,
            JobOwner::VmStage { vm },
        )?;
        self.vms[vm.0].live_job = Some(job);
        self.push_trace(t, "ssh_admitted", Some(vm), Some(node), String::new());
        Ok(())
    }

    fn on_transfer_done(&mut self, vm: VmId, t: f64) -> Result<(), CloudError> {
        let (cursor, node) = {
            let rec = &self.vms[vm.0];
            debug_assert!(!rec.failed, "failed VMs have no live transfers");
            (rec.cursor, rec.node)
        };
        let stage = self.vms[vm.0].plan.as_ref().expect("plan set").stages[cursor];
        self.vms[vm.0].live_job = None;
        self.push_trace(
            t,
            "stage_complete",
            Some(vm),
            Some(node),
            stage.label.into(),
        );
        let freed_slot_on = match stage.demand {
            StageDemand::Transfer {
                route: TransferRoute::SshCopy { node: n },
                ..
            } => {
                self.admission[n.0].active -= 1;
                Some(n)
            }
            _ => None,
        };
        self.vms[vm.0].cursor += 1;
        self.advance_plan(vm, t)?;
        if let Some(n) = freed_slot_on {
            self.admit_queued_copies(n, t)?;
        }
        Ok(())
    }

    fn admit_queued_copies(&mut self, node: NodeId, t: f64) -> Result<(), CloudError> {
        while self.admission[node.0].active < self.cluster.nodes[node.0].max_concurrent_receives {
            let Some(vm) = self.admission[node.0].queue.pop_front() else {
                return Ok(());
            };
            if self.vms[vm.0].failed {
                continue;
            }
            let cursor = self.vms[vm.0].cursor;
            let stage = self.vms[vm.0].plan.as_ref().expect("plan set").stages[cursor];
            match stage.demand {
                StageDemand::Transfer {
                    bytes_mib,
                    route: TransferRoute::SshCopy { .. },
                    cap_mib_s,
                } => self.admit_ssh_copy(vm, node, bytes_mib, cap_mib_s, t)?,
                other => unreachable!("queued copy with a non-ssh stage: {other:?}"),
            }
        }
        Ok(())
    }

    fn on_plan_stage_done(&mut self, vm: VmId, index: usize, t: f64) -> Result<(), CloudError> {
        let rec = &self.vms[vm.0];
        if rec.failed {
            return Ok(());
        }
        debug_assert_eq!(index, rec.cursor, "timer for a stage that already moved");
        let stage = rec.plan.as_ref().expect("plan set").stages[index];
        let node = rec.node;
        self.push_trace(
            t,
            "stage_complete",
            Some(vm),
            Some(node),
            stage.label.into(),
        );
        self.vms[vm.0].cursor += 1;
        self.advance_plan(vm, t)
    }

    fn on_sync_done(
        &mut self,
        node: NodeId,
        template: TemplateId,
        version: u32,
        t: f64,
    ) -> Result<(), CloudError> {
        self.push_trace(
            t,
            "sync_complete",
            None,
            Some(node),
            format!("template {} v{version}", template.0),
        );
        let released = self.images.on_sync_complete(node, template, version);
        for vm in released {
            if self.vms[vm.0].failed {
                continue;
            }
            self.push_trace(t, "image_ready", Some(vm), Some(node), String::new());
            self.vms[vm.0].cursor += 1;
            self.advance_plan(vm, t)?;
        }
        Ok(())
    }

    /// Moves a VM into a contextualization stage. Timed stages schedule
    /// their completion (with jitter when configured); `Running` is
    /// recorded as the deployment endpoint.
    fn enter_context_stage(
        &mut self,
        vm: VmId,
        state: LifecycleState,
        t: f64,
    ) -> Result<(), CloudError> {
        self.enter_state(vm, state, t);
        if state == LifecycleState::Running {
            self.vms[vm.0].running_s = Some(t);
            return Ok(());
        }
        let os = self.vms[vm.0].os;
        let duration = stage_duration(state, os, &self.stages, self.jitter_sigma, &mut self.rng)
            .expect("boot-path stages are timed");
        self.engine.schedule(
            t + duration,
            EventKind::StageComplete {
                vm,
                stage: StageRef::Context { state },
            },
        )?;
        Ok(())
    }

    fn on_context_stage_done(
        &mut self,
        vm: VmId,
        state: LifecycleState,
        t: f64,
    ) -> Result<(), CloudError> {
        let rec = &self.vms[vm.0];
        if rec.failed {
            return Ok(());
        }
        debug_assert_eq!(state, rec.state, "stale contextualization timer");
        let os = rec.os;
        if state == LifecycleState::MacLookup {
            let mac = rec.mac.expect("mac assigned before lookup");
            let node = rec.node;
            if self.injected_lookup_failures.contains(&vm) {
                self.fail_vm(vm, t, "hostname lookup failed (injected fault)".into());
                return Ok(());
            }
            match self.mac_pool.lookup_hostname(mac) {
                Ok(hostname) => {
                    let hostname = hostname.to_string();
                    self.vms[vm.0].hostname = Some(hostname.clone());
                    self.push_trace(t, "hostname_set", Some(vm), Some(node), hostname);
                }
                Err(err) => {
                    self.fail_vm(vm, t, format!("hostname lookup failed: {err}"));
                    return Ok(());
                }
            }
        }
        let next = boot_next(state, os).expect("boot path continues to Running");
        self.enter_context_stage(vm, next, t)
    }

    fn enter_state(&mut self, vm: VmId, state: LifecycleState, t: f64) {
        let node = self.vms[vm.0].node;
        self.vms[vm.0].state = state;
        self.vms[vm.0].stage_log.push((state, t));
        self.push_trace(t, snake_label(state), Some(vm), Some(node), String::new());
    }

    /// Terminal failure: record the reason and hand back everything the
    /// VM held (transfer slot, disk bytes, MAC).
    fn fail_vm(&mut self, vm: VmId, t: f64, reason: String) {
        let node = self.vms[vm.0].node;
        self.push_trace(t, "failed", Some(vm), Some(node), reason.clone());
        self.vms[vm.0].failed = true;
        self.vms[vm.0].fail_reason = Some(reason);

        if let Some(job) = self.vms[vm.0].live_job.take() {
            let cursor = self.vms[vm.0].cursor;
            let stage = self.vms[vm.0].plan.as_ref().expect("plan set").stages[cursor];
            let _ = self.engine.cancel_transfer(job);
            if let StageDemand::Transfer {
                route: TransferRoute::SshCopy { node: n },
                ..
            } = stage.demand
            {
                self.admission[n.0].active -= 1;
                let _ = self.admit_queued_copies(n, t);
            }
        }
        for adm in &mut self.admission {
            adm.queue.retain(|queued| *queued != vm);
        }
        if self.vms[vm.0].disk_claim_applied {
            let claim = self.vms[vm.0].plan.as_ref().expect("plan set").disk_claim;
            match claim.place {
                StoragePlace::CentralStorage => self.ledger.release_central(claim.bytes_mib),
                StoragePlace::NodeDisk(n) => self.ledger.release_node(n, claim.bytes_mib),
            }
            self.vms[vm.0].disk_claim_applied = false;
        }
        self.release_mac_of(vm, t);
        let _ = self.pump_pending_macs(t);
    }

    fn release_mac_of(&mut self, vm: VmId, t: f64) {
        if let Some(mac) = self.vms[vm.0].mac.take() {
            if let Err(err) = self.mac_pool.release(mac) {
                self.note_violation(t, format!("mac release for {vm}: {err}"));
            }
        }
    }

    /// Starts queued requests as MACs come free.
    fn pump_pending_macs(&mut self, t: f64) -> Result<(), CloudError> {
        while self.mac_pool.free_count() > 0 {
            let Some(vm) = self.pending_macs.pop_front() else {
                return Ok(());
            };
            if self.vms[vm.0].failed {
                continue;
            }
            self.begin_provisioning(vm, t)?;
        }
        Ok(())
    }

    /// Checks the cross-cutting resource invariants and records any new
    /// violation (each distinct message once, stamped with first-seen time).
    fn audit_now(&mut self, t: f64) {
        if !self.mac_pool.conserved() {
            self.note_violation(t, "mac pool conservation violated".into());
        }
        for violation in self.ledger.audit() {
            self.note_violation(t, violation);
        }
        let mut seen = BTreeSet::new();
        let mut duplicates = Vec::new();
        for (i, rec) in self.vms.iter().enumerate() {
            if rec.failed || rec.state == LifecycleState::ShutDown {
                continue;
            }
            if let Some(hostname) = &rec.hostname {
                if !seen.insert(hostname.clone()) {
                    duplicates.push(format!(
                        "hostname {hostname:?} shared by live VMs (vm{})",
                        i + 1
                    ));
                }
            }
        }
        for msg in duplicates {
            self.note_violation(t, msg);
        }
    }

    fn note_violation(&mut self, t: f64, message: String) {
        if self.seen_violations.insert(message.clone()) {
            self.violations.push(format!("t={t:.3}s: {message}"));
        }
    }

    fn push_trace(
        &mut self,
        time_s: f64,
        kind: &'static str,
        vm: Option<VmId>,
        node: Option<NodeId>,
        detail: String,
    ) {
        self.trace.push(TraceEvent {
            time_s,
            kind,
            vm,
            node,
            detail,
        });
    }
}
