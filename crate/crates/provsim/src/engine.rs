//! Discrete-event core: the simulation clock, the event queue, and
//! fair-share transfer links.
//!
//! # Event ordering
//!
//! Events are processed in ascending `(time, insertion order)`. Two events
//! scheduled for the same instant fire in the order they were scheduled,
//! which keeps runs reproducible: a simulation is a pure function of its
//! inputs.
//!
//! # Transfer links
//!
//! A [`LinkId`] names a capacity-limited resource (a disk, a NIC, a
//! front-end copy pipeline). Active jobs on a link share its capacity
//! max-min fairly: every job gets an equal split, jobs whose per-job cap
//! is below their split are clamped to the cap, and the residual is
//! redistributed among the rest until a fixpoint. Rates only change at
//! event boundaries, so progress between events is linear and completion
//! times are computed exactly rather than polled.
//!
//! Scheduled completion events carry the link generation they were
//! predicted under; any change to a link's membership bumps the
//! generation, which lazily invalidates stale predictions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::domain::{NodeId, TemplateId, VmId};
use crate::lifecycle::LifecycleState;

/// Default watchdog: a run that processes more events than this is
/// declared divergent instead of looping forever.
pub const DEFAULT_MAX_EVENTS: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct JobId(pub usize);

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("event scheduled at {event_time}s which is before the clock at {clock}s")]
    EventInPast { event_time: f64, clock: f64 },
    #[error("event time {0} is not finite")]
    NonFiniteTime(f64),
    #[error("simulation divergence: exceeded {limit} events")]
    Divergence { limit: u64 },
    #[error("unknown link {0:?}")]
    UnknownLink(LinkId),
    #[error("unknown or finished job {0:?}")]
    UnknownJob(JobId),
    #[error("transfer size {0} MiB is invalid")]
    BadTransferSize(f64),
    #[error("per-job cap {0} MiB/s is invalid")]
    BadJobCap(f64),
}

/// Who a transfer job belongs to; determines the completion event kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobOwner {
    /// A provisioning-plan transfer stage of one VM.
    VmStage { vm: VmId },
    /// A background image synchronization to a node cache.
    Sync {
        node: NodeId,
        template: TemplateId,
        version: u32,
    },
}

/// Which stage of a VM a `StageComplete` event finishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageRef {
    /// A timed stage of the provisioning plan (index into the plan).
    Plan { index: usize },
    /// A timed contextualization stage.
    Context { state: LifecycleState },
}

/// Payload of a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    RequestArrival {
        vm: VmId,
    },
    StageComplete {
        vm: VmId,
        stage: StageRef,
    },
    TransferComplete {
        job: JobId,
        link: LinkId,
        generation: u64,
    },
    SyncComplete {
        job: JobId,
        link: LinkId,
        generation: u64,
    },
}

/// A processed event handed to the driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventPayload {
    RequestArrival { vm: VmId },
    StageComplete { vm: VmId, stage: StageRef },
    TransferComplete { job: JobId, owner: JobOwner },
    SyncComplete { job: JobId, owner: JobOwner },
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.time.total_cmp(&other.time) == Ordering::Equal && self.seq == other.seq
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the std max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct Job {
    owner: JobOwner,
    link: LinkId,
    total_mib: f64,
    done_mib: f64,
    cap_mib_s: Option<f64>,
    rate_mib_s: f64,
    live: bool,
}

#[derive(Debug)]
struct Link {
    label: String,
    capacity_mib_s: f64,
    /// Active jobs in admission order; ties in completion predictions are
    /// broken by this order.
    active: Vec<JobId>,
    last_update_s: f64,
    generation: u64,
}

/// The simulation core. Owns the clock, the pending-event heap, and all
/// transfer links and jobs.
#[derive(Debug)]
pub struct Engine {
    clock: f64,
    seq: u64,
    heap: BinaryHeap<Scheduled>,
    links: Vec<Link>,
    jobs: Vec<Job>,
    processed: u64,
    max_events: u64,
}

impl Engine {
    pub fn new() -> Engine {
        Engine::with_max_events(DEFAULT_MAX_EVENTS)
    }

    pub fn with_max_events(max_events: u64) -> Engine {
        Engine {
            clock: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            links: Vec::new(),
            jobs: Vec::new(),
            processed: 0,
            max_events,
        }
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    /// Registers a shared link with the given capacity (MiB/s).
    pub fn add_link(&mut self, label: impl Into<String>, capacity_mib_s: f64) -> LinkId {
        assert!(
            capacity_mib_s > 0.0,
            "link capacity must be positive (validated upstream)"
        );
        let id = LinkId(self.links.len());
        self.links.push(Link {
            label: label.into(),
            capacity_mib_s,
            active: Vec::new(),
            last_update_s: 0.0,
            generation: 0,
        });
        id
    }

    pub fn link_label(&self, link: LinkId) -> &str {
        &self.links[link.0].label
    }

    /// Instantaneous aggregate rate over a link (sum of job rates).
    pub fn link_utilization(&self, link: LinkId) -> f64 {
        self.links[link.0]
            .active
            .iter()
            .map(|j| self.jobs[j.0].rate_mib_s)
            .sum()
    }

    pub fn link_active_jobs(&self, link: LinkId) -> usize {
        self.links[link.0].active.len()
    }

    /// (done, total) MiB for a live job.
    pub fn job_progress(&self, job: JobId) -> Option<(f64, f64)> {
        let j = self.jobs.get(job.0)?;
        if !j.live {
            return None;
        }
        // Project progress to the current clock; rates are constant
        // between events so this is exact.
        let link = &self.links[j.link.0];
        let dt = self.clock - link.last_update_s;
        let done = (j.done_mib + j.rate_mib_s * dt).min(j.total_mib);
        Some((done, j.total_mib))
    }

    /// Schedules an event. Events may target the current instant but
    /// never the past.
    pub fn schedule(&mut self, time: f64, kind: EventKind) -> Result<(), SimError> {
        if !time.is_finite() {
            return Err(SimError::NonFiniteTime(time));
        }
        if time < self.clock {
            return Err(SimError::EventInPast {
                event_time: time,
                clock: self.clock,
            });
        }
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Scheduled { time, seq, kind });
        Ok(())
    }

    /// Starts a transfer of `bytes_mib` on `link`, optionally capped at
    /// `cap_mib_s`. Zero-byte transfers are legal and complete at the
    /// current instant.
    pub fn start_transfer(
        &mut self,
        link: LinkId,
        bytes_mib: f64,
        cap_mib_s: Option<f64>,
        owner: JobOwner,
    ) -> Result<JobId, SimError> {
        if link.0 >= self.links.len() {
            return Err(SimError::UnknownLink(link));
        }
        if !bytes_mib.is_finite() || bytes_mib < 0.0 {
            return Err(SimError::BadTransferSize(bytes_mib));
        }
        if let Some(cap) = cap_mib_s {
            if !cap.is_finite() || cap <= 0.0 {
                return Err(SimError::BadJobCap(cap));
            }
        }
        let id = JobId(self.jobs.len());
        self.jobs.push(Job {
            owner,
            link,
            total_mib: bytes_mib,
            done_mib: 0.0,
            cap_mib_s,
            rate_mib_s: 0.0,
            live: true,
        });
        self.advance_link(link);
        self.links[link.0].active.push(id);
        self.resync_link(link)?;
        Ok(id)
    }

    /// Removes a job from its link before completion, returning the MiB
    /// transferred so far.
    pub fn cancel_transfer(&mut self, job: JobId) -> Result<f64, SimError> {
        let (link, live) = match self.jobs.get(job.0) {
            Some(j) => (j.link, j.live),
            None => return Err(SimError::UnknownJob(job)),
        };
        if !live {
            return Err(SimError::UnknownJob(job));
        }
        self.advance_link(link);
        let j = &mut self.jobs[job.0];
        j.live = false;
        let done = j.done_mib;
        self.links[link.0].active.retain(|id| *id != job);
        self.resync_link(link)?;
        Ok(done)
    }

    /// Pops and processes the next event. Returns `None` when the queue
    /// is empty. Stale transfer predictions are skipped transparently.
    pub fn next_event(&mut self) -> Result<Option<Event>, SimError> {
        loop {
            let entry = match self.heap.pop() {
                Some(e) => e,
                None => return Ok(None),
            };
            self.processed += 1;
            if self.processed > self.max_events {
                return Err(SimError::Divergence {
                    limit: self.max_events,
                });
            }
            debug_assert!(entry.time >= self.clock, "heap produced a past event");
            self.clock = entry.time;
            match entry.kind {
                EventKind::RequestArrival { vm } => {
                    return Ok(Some(Event {
                        time: entry.time,
                        payload: EventPayload::RequestArrival { vm },
                    }))
                }
                EventKind::StageComplete { vm, stage } => {
                    return Ok(Some(Event {
                        time: entry.time,
                        payload: EventPayload::StageComplete { vm, stage },
                    }))
                }
                EventKind::TransferComplete {
                    job,
                    link,
                    generation,
                }
                | EventKind::SyncComplete {
                    job,
                    link,
                    generation,
                } => {
                    if self.links[link.0].generation != generation {
                        continue; // superseded prediction
                    }
                    let owner = self.complete_job(link, job)?;
                    let payload = match owner {
                        JobOwner::VmStage { .. } => EventPayload::TransferComplete { job, owner },
                        JobOwner::Sync { .. } => EventPayload::SyncComplete { job, owner },
                    };
                    return Ok(Some(Event {
                        time: entry.time,
                        payload,
                    }));
                }
            }
        }
    }

    /// Brings a link's job progress up to the current clock.
    fn advance_link(&mut self, link: LinkId) {
        let l = &mut self.links[link.0];
        let dt = self.clock - l.last_update_s;
        if dt > 0.0 {
            for id in &l.active {
                let j = &mut self.jobs[id.0];
                j.done_mib = (j.done_mib + j.rate_mib_s * dt).min(j.total_mib);
            }
        }
        l.last_update_s = self.clock;
    }

    fn complete_job(&mut self, link: LinkId, job: JobId) -> Result<JobOwner, SimError> {
        self.advance_link(link);
        let j = self.jobs.get_mut(job.0).ok_or(SimError::UnknownJob(job))?;
        if !j.live {
            return Err(SimError::UnknownJob(job));
        }
        j.done_mib = j.total_mib; // snap away float residue
        j.live = false;
        let owner = j.owner;
        self.links[link.0].active.retain(|id| *id != job);
        self.resync_link(link)?;
        Ok(owner)
    }

    /// Recomputes fair-share rates after a membership change and schedules
    /// the next predicted completion.
    fn resync_link(&mut self, link: LinkId) -> Result<(), SimError> {
        self.recompute_rates(link);
        self.links[link.0].generation += 1;
        let generation = self.links[link.0].generation;
        if let Some((job, at)) = self.next_completion(link) {
            let kind = match self.jobs[job.0].owner {
                JobOwner::VmStage { .. } => EventKind::TransferComplete {
                    job,
                    link,
                    generation,
                },
                JobOwner::Sync { .. } => EventKind::SyncComplete {
                    job,
                    link,
                    generation,
                },
            };
            self.schedule(at, kind)?;
        }
        Ok(())
    }

    /// Max-min fair allocation: equal split, clamp capped jobs, then
    /// redistribute the residual among the uncapped until a fixpoint.
    fn recompute_rates(&mut self, link: LinkId) {
        let ids: Vec<JobId> = self.links[link.0].active.clone();
        if ids.is_empty() {
            return;
        }
        let mut remaining = self.links[link.0].capacity_mib_s;
        let mut open: Vec<JobId> = ids;
        loop {
            let share = remaining / open.len() as f64;
            let mut clamped = Vec::new();
            let mut still_open = Vec::new();
            for id in &open {
                match self.jobs[id.0].cap_mib_s {
                    Some(cap) if cap < share => clamped.push((*id, cap)),
                    _ => still_open.push(*id),
                }
            }
            if clamped.is_empty() {
                for id in &still_open {
                    self.jobs[id.0].rate_mib_s = share;
                }
                break;
            }
            for (id, cap) in clamped {
                self.jobs[id.0].rate_mib_s = cap;
                remaining -= cap;
            }
            open = still_open;
            if open.is_empty() {
                break;
            }
        }
    }

    /// Earliest predicted completion on a link; ties resolve to the job
    /// admitted first.
    fn next_completion(&self, link: LinkId) -> Option<(JobId, f64)> {
        let l = &self.links[link.0];
        let mut best: Option<(JobId, f64)> = None;
        for id in &l.active {
            let j = &self.jobs[id.0];
            let remaining = (j.total_mib - j.done_mib).max(0.0);
            let eta = self.clock + remaining / j.rate_mib_s;
            if best.map_or(true, |(_, t)| eta < t) {
                best = Some((*id, eta));
            }
        }
        best
    }
}

impl Default for Engine {
    fn default() -> Self {
        Engine::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain_completions(engine: &mut Engine) -> Vec<(f64, JobId)> {
        let mut out = Vec::new();
        while let Some(ev) = engine.next_event().unwrap() {
            if let EventPayload::TransferComplete { job, .. } = ev.payload {
                out.push((ev.time, job));
            }
        }
        out
    }

    #[test]
    fn events_fire_in_time_order_with_fifo_ties() {
        let mut engine = Engine::new();
        engine
            .schedule(5.0, EventKind::RequestArrival { vm: VmId(1) })
            .unwrap();
        engine
            .schedule(1.0, EventKind::RequestArrival { vm: VmId(0) })
            .unwrap();
        engine
            .schedule(5.0, EventKind::RequestArrival { vm: VmId(2) })
            .unwrap();
        let mut seen = Vec::new();
        while let Some(ev) = engine.next_event().unwrap() {
            if let EventPayload::RequestArrival { vm } = ev.payload {
                seen.push((ev.time, vm.0));
            }
        }
        assert_eq!(seen, vec![(1.0, 0), (5.0, 1), (5.0, 2)]);
        assert_eq!(engine.clock(), 5.0);
    }

    #[test]
    fn scheduling_into_the_past_is_fatal() {
        let mut engine = Engine::new();
        engine
            .schedule(2.0, EventKind::RequestArrival { vm: VmId(0) })
            .unwrap();
        engine.next_event().unwrap();
        let err = engine
            .schedule(1.0, EventKind::RequestArrival { vm: VmId(1) })
            .unwrap_err();
        assert_eq!(
            err,
            SimError::EventInPast {
                event_time: 1.0,
                clock: 2.0
            }
        );
    }

    #[test]
    fn empty_queue_leaves_clock_at_zero() {
        let mut engine = Engine::new();
        assert_eq!(engine.next_event().unwrap(), None);
        assert_eq!(engine.clock(), 0.0);
        assert_eq!(engine.events_processed(), 0);
    }

    #[test]
    fn two_jobs_share_a_link_evenly() {
        // 10 MiB/s link; 100 MiB and 200 MiB started together.
        // Equal split 5/5 until t=20 when the first finishes (100/5);
        // the second then takes the full 10 MiB/s for its remaining
        // 100 MiB and finishes at t=30.
        let mut engine = Engine::new();
        let link = engine.add_link("disk", 10.0);
        let a = engine
            .start_transfer(link, 100.0, None, JobOwner::VmStage { vm: VmId(0) })
            .unwrap();
        let b = engine
            .start_transfer(link, 200.0, None, JobOwner::VmStage { vm: VmId(1) })
            .unwrap();
        let done = drain_completions(&mut engine);
        assert_eq!(done.len(), 2);
        assert_eq!(done[0].1, a);
        assert!((done[0].0 - 20.0).abs() < 1e-9);
        assert_eq!(done[1].1, b);
        assert!((done[1].0 - 30.0).abs() < 1e-9);
    }

    #[test]
    fn caps_clamp_jobs_and_leave_capacity_unused() {
        // Two jobs capped at 3 MiB/s on a 10 MiB/s link: utilization 6.
        let mut engine = Engine::new();
        let link = engine.add_link("nic", 10.0);
        for vm in 0..2 {
            engine
                .start_transfer(link, 30.0, Some(3.0), JobOwner::VmStage { vm: VmId(vm) })
                .unwrap();
        }
        assert!((engine.link_utilization(link) - 6.0).abs() < 1e-12);
        let done = drain_completions(&mut engine);
        assert!((done[0].0 - 10.0).abs() < 1e-9);
        assert!((done[1].0 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn residual_capacity_is_redistributed_to_uncapped_jobs() {
        // Capped 2 MiB/s + uncapped on a 10 MiB/s link: 2 + 8.
        let mut engine = Engine::new();
        let link = engine.add_link("nic", 10.0);
        engine
            .start_transfer(link, 20.0, Some(2.0), JobOwner::VmStage { vm: VmId(0) })
            .unwrap();
        let b = engine
            .start_transfer(link, 80.0, None, JobOwner::VmStage { vm: VmId(1) })
            .unwrap();
        let done = drain_completions(&mut engine);
        // Both need exactly 10 s at rates 2 and 8.
        assert_eq!(done.len(), 2);
        assert!(done
            .iter()
            .any(|(t, j)| *j == b && (*t - 10.0).abs() < 1e-9));
    }

    #[test]
    fn single_uncapped_job_gets_full_capacity() {
        let mut engine = Engine::new();
        let link = engine.add_link("disk", 25.0);
        engine
            .start_transfer(link, 100.0, None, JobOwner::VmStage { vm: VmId(0) })
            .unwrap();
        assert!((engine.link_utilization(link) - 25.0).abs() < 1e-12);
        let done = drain_completions(&mut engine);
        assert!((done[0].0 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_byte_transfer_completes_at_the_current_instant() {
        let mut engine = Engine::new();
        let link = engine.add_link("disk", 5.0);
        engine
            .start_transfer(link, 0.0, None, JobOwner::VmStage { vm: VmId(0) })
            .unwrap();
        let done = drain_completions(&mut engine);
        assert_eq!(done[0].0, 0.0);
    }

    #[test]
    fn late_arrival_shares_from_its_start() {
        // 10 MiB/s link. Job A (100 MiB) starts at 0; job B (100 MiB)
        // at t=4 via an arrival event. A runs alone for 4 s (40 MiB),
        // then both at 5 MiB/s: A finishes at 4 + 60/5 = 16,
        // B at 16 + 40/10 = 20.
        let mut engine = Engine::new();
        let link = engine.add_link("disk", 10.0);
        engine
            .start_transfer(link, 100.0, None, JobOwner::VmStage { vm: VmId(0) })
            .unwrap();
        engine
            .schedule(4.0, EventKind::RequestArrival { vm: VmId(1) })
            .unwrap();
        let mut completions = Vec::new();
        while let Some(ev) = engine.next_event().unwrap() {
            match ev.payload {
                EventPayload::RequestArrival { vm } => {
                    engine
                        .start_transfer(link, 100.0, None, JobOwner::VmStage { vm })
                        .unwrap();
                }
                EventPayload::TransferComplete { .. } => completions.push(ev.time),
                _ => {}
            }
        }
        assert!((completions[0] - 16.0).abs() < 1e-9);
        assert!((completions[1] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn cancel_returns_progress_and_speeds_up_the_rest() {
        let mut engine = Engine::new();
        let link = engine.add_link("disk", 10.0);
        let a = engine
            .start_transfer(link, 100.0, None, JobOwner::VmStage { vm: VmId(0) })
            .unwrap();
        engine
            .start_transfer(link, 100.0, None, JobOwner::VmStage { vm: VmId(1) })
            .unwrap();
        engine
            .schedule(4.0, EventKind::RequestArrival { vm: VmId(9) })
            .unwrap();
        // At t=4 both have moved 20 MiB; cancel A.
        let mut completions = Vec::new();
        while let Some(ev) = engine.next_event().unwrap() {
            match ev.payload {
                EventPayload::RequestArrival { .. } => {
                    let done = engine.cancel_transfer(a).unwrap();
                    assert!((done - 20.0).abs() < 1e-9);
                }
                EventPayload::TransferComplete { .. } => completions.push(ev.time),
                _ => {}
            }
        }
        // B: 20 MiB by t=4, then 80 MiB at 10 MiB/s -> t=12.
        assert_eq!(completions.len(), 1);
        assert!((completions[0] - 12.0).abs() < 1e-9);
        assert!(engine.job_progress(a).is_none());
    }

    #[test]
    fn watchdog_trips_on_runaway_event_counts() {
        let mut engine = Engine::with_max_events(10);
        for i in 0..20 {
            engine
                .schedule(i as f64, EventKind::RequestArrival { vm: VmId(i) })
                .unwrap();
        }
        let mut err = None;
        loop {
            match engine.next_event() {
                Ok(Some(_)) => continue,
                Ok(None) => break,
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        assert_eq!(err, Some(SimError::Divergence { limit: 10 }));
    }
}
