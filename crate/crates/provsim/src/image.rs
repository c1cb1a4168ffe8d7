//! The image registry: distributes template images to every node ahead of
//! demand and keeps the per-node caches in sync across template updates.
//! Only the locally-cached architecture consults it.
//!
//! The registry is a passive state machine: it owns cache status per
//! (node, template) but all timing flows through the [`Engine`] — syncs
//! are ordinary transfer jobs on each node's receive link, sharing
//! bandwidth fairly with any foreground traffic.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{DiskFullError, DiskLedger, ImageTemplate, NodeId, TemplateId, VmId};
use crate::engine::{Engine, JobId, JobOwner, LinkId, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Absent,
    Syncing,
    Cached,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EntryStatus {
    Absent,
    Syncing { job: JobId },
    Cached,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    version: u32,
    status: EntryStatus,
}

/// Result of an image acquisition: the caller either proceeds now or
/// parks until the in-flight sync for that (node, template) completes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquire {
    Ready,
    Wait,
}

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(TemplateId),
    #[error("template {id:?} already registered")]
    AlreadyRegistered { id: TemplateId },
    #[error(
        "template {id:?}: version must advance by exactly 1 (current {current}, proposed {proposed})"
    )]
    VersionRegression {
        id: TemplateId,
        current: u32,
        proposed: u32,
    },
    #[error(transparent)]
    DiskFull(#[from] DiskFullError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug)]
pub struct ImageManager {
    /// (node, that node's receive link), in fan-out order.
    node_links: Vec<(NodeId, LinkId)>,
    templates: BTreeMap<TemplateId, ImageTemplate>,
    entries: BTreeMap<(TemplateId, NodeId), Entry>,
    waiters: BTreeMap<(TemplateId, NodeId), Vec<VmId>>,
    warnings: Vec<String>,
}

impl ImageManager {
    pub fn new(node_links: Vec<(NodeId, LinkId)>) -> ImageManager {
        ImageManager {
            node_links,
            templates: BTreeMap::new(),
            entries: BTreeMap::new(),
            waiters: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn status(&self, node: NodeId, template: TemplateId) -> CacheStatus {
        match self.entries.get(&(template, node)).map(|e| e.status) {
            Some(EntryStatus::Cached) => CacheStatus::Cached,
            Some(EntryStatus::Syncing { .. }) => CacheStatus::Syncing,
            _ => CacheStatus::Absent,
        }
    }

    pub fn entry_version(&self, node: NodeId, template: TemplateId) -> Option<u32> {
        self.entries.get(&(template, node)).map(|e| e.version)
    }

    /// Bytes moved so far by an in-flight sync, if one exists.
    pub fn sync_progress_mib(
        &self,
        engine: &Engine,
        node: NodeId,
        template: TemplateId,
    ) -> Option<(f64, f64)> {
        match self.entries.get(&(template, node))?.status {
            EntryStatus::Syncing { job } => engine.job_progress(job),
            _ => None,
        }
    }

    /// True when every fan-out node holds the template's current version.
    pub fn all_cached(&self, template: TemplateId) -> bool {
        let Some(current) = self.templates.get(&template).map(|t| t.version) else {
            return false;
        };
        self.node_links.iter().all(|(node, _)| {
            matches!(
                self.entries.get(&(template, *node)),
                Some(Entry {
                    version,
                    status: EntryStatus::Cached
                }) if *version == current
            )
        })
    }

    /// Number of in-flight syncs for a template (the no-duplicate
    /// invariant bounds this by the node count, one per node).
    pub fn live_sync_count(&self, template: TemplateId) -> usize {
        self.entries
            .iter()
            .filter(|((t, _), e)| *t == template && matches!(e.status, EntryStatus::Syncing { .. }))
            .count()
    }

    /// Records a template and fans out one background sync per node on
    /// that node's receive link. A node without enough free disk keeps an
    /// `Absent` entry and a warning is recorded instead of failing the
    /// whole registration.
    pub fn register_template(
        &mut self,
        engine: &mut Engine,
        ledger: &mut DiskLedger,
        id: TemplateId,
        template: &ImageTemplate,
    ) -> Result<(), ImageError> {
        if self.templates.contains_key(&id) {
            return Err(ImageError::AlreadyRegistered { id });
        }
        self.templates.insert(id, template.clone());
        let version = template.version;
        for (node, link) in self.node_links.clone() {
            self.start_sync(engine, ledger, id, version, node, link)?;
        }
        Ok(())
    }

    /// Registers a template with every node already holding it, as if the
    /// background fan-out had finished before simulation start. Disk is
    /// charged exactly as a real sync would have; a full node keeps an
    /// `Absent` entry plus a warning.
    pub fn prewarm_template(
        &mut self,
        ledger: &mut DiskLedger,
        id: TemplateId,
        template: &ImageTemplate,
    ) -> Result<(), ImageError> {
        if self.templates.contains_key(&id) {
            return Err(ImageError::AlreadyRegistered { id });
        }
        self.templates.insert(id, template.clone());
        for (node, _) in self.node_links.clone() {
            let entry = match ledger.try_reserve_node(node, template.size_mib) {
                Ok(()) => Entry {
                    version: template.version,
                    status: EntryStatus::Cached,
                },
                Err(full) => {
                    self.warnings.push(format!(
                        "template {:?} not cached on node {node}: {full}",
                        template.id
                    ));
                    Entry {
                        version: template.version,
                        status: EntryStatus::Absent,
                    }
                }
            };
            self.entries.insert((id, node), entry);
        }
        Ok(())
    }

    /// Advances a template to the next version: every cached or syncing
    /// copy of the old version is dropped (bytes freed, in-flight jobs
    /// cancelled) and a fresh fan-out begins.
    pub fn handle_template_update(
        &mut self,
        engine: &mut Engine,
        ledger: &mut DiskLedger,
        id: TemplateId,
        new_version: u32,
    ) -> Result<(), ImageError> {
        let template = self
            .templates
            .get_mut(&id)
            .ok_or(ImageError::UnknownTemplate(id))?;
        if new_version != template.version + 1 {
            return Err(ImageError::VersionRegression {
                id,
                current: template.version,
                proposed: new_version,
            });
        }
        template.version = new_version;
        let size = template.size_mib;
        for (node, link) in self.node_links.clone() {
            match self.entries.get(&(id, node)).map(|e| e.status) {
                Some(EntryStatus::Cached) => {
                    ledger.release_node(node, size);
                }
                Some(EntryStatus::Syncing { job }) => {
                    engine.cancel_transfer(job)?;
                    ledger.release_node(node, size);
                }
                _ => {}
            }
            self.entries.insert(
                (id, node),
                Entry {
                    version: new_version,
                    status: EntryStatus::Absent,
                },
            );
            self.start_sync(engine, ledger, id, new_version, node, link)?;
        }
        Ok(())
    }

    /// Readiness contract for a provisioning request on `node`:
    /// `Ready` for a warm cache; otherwise the caller must park until
    /// [`ImageManager::on_sync_complete`] hands its id back. At most one
    /// transfer is ever in flight per (node, template) — late acquirers
    /// join the existing sync's waiter list.
    pub fn acquire_image(
        &mut self,
        engine: &mut Engine,
        ledger: &mut DiskLedger,
        node: NodeId,
        id: TemplateId,
        waiter: VmId,
    ) -> Result<Acquire, ImageError> {
        let template = self
            .templates
            .get(&id)
            .ok_or(ImageError::UnknownTemplate(id))?;
        let version = template.version;
        match self.entries.get(&(id, node)).map(|e| e.status) {
            Some(EntryStatus::Cached) => Ok(Acquire::Ready),
            Some(EntryStatus::Syncing { .. }) => {
                self.waiters.entry((id, node)).or_default().push(waiter);
                Ok(Acquire::Wait)
            }
            _ => {
                let link = self
                    .node_links
                    .iter()
                    .find(|(n, _)| *n == node)
                    .map(|(_, l)| *l)
                    .expect("acquire on a node outside the fan-out set");
                let size = self.templates[&id].size_mib;
                ledger.try_reserve_node(node, size)?;
                let job = engine.start_transfer(
                    link,
                    size,
                    None,
                    JobOwner::Sync {
                        node,
                        template: id,
                        version,
                    },
                )?;
                self.entries.insert(
                    (id, node),
                    Entry {
                        version,
                        status: EntryStatus::Syncing { job },
                    },
                );
                self.waiters.entry((id, node)).or_default().push(waiter);
                Ok(Acquire::Wait)
            }
        }
    }

    /// Marks a sync finished and returns the requests parked on it, in
    /// arrival order. Drive this from the event loop on `SyncComplete`.
    pub fn on_sync_complete(
        &mut self,
        node: NodeId,
        template: TemplateId,
        version: u32,
    ) -> Vec<VmId> {
        match self.entries.get_mut(&(template, node)) {
            Some(entry) => {
                debug_assert!(
                    matches!(entry.status, EntryStatus::Syncing { .. }),
                    "sync completion for a non-syncing entry"
                );
                entry.status = EntryStatus::Cached;
                entry.version = version;
                self.waiters.remove(&(template, node)).unwrap_or_default()
            }
            None => Vec::new(),
        }
    }

    fn start_sync(
        &mut self,
        engine: &mut Engine,
        ledger: &mut DiskLedger,
        id: TemplateId,
        version: u32,
        node: NodeId,
        link: LinkId,
    ) -> Result<(), ImageError> {
        let size = self.templates[&id].size_mib;
        if let Err(full) = ledger.try_reserve_node(node, size) {
            self.warnings.push(format!(
                "template {:?} not cached on node {node}: {full}",
                self.templates[&id].id
            ));
            self.entries.insert(
                (id, node),
                Entry {
                    version,
                    status: EntryStatus::Absent,
                },
            );
            return Ok(());
        }
        let job = engine.start_transfer(
            link,
            size,
            None,
            JobOwner::Sync {
                node,
                template: id,
                version,
            },
        )?;
        self.entries.insert(
            (id, node),
            Entry {
                version,
                status: EntryStatus::Syncing { job },
            },
        );
        Ok(())
    }
}
