//! File-system client: mounts a volume, caches partition views, leaders and
//! metadata, and runs the create/link/unlink and read/write workflows
//! against the cluster through a [`Transport`].

mod file;
mod namespace;
mod rpc;

pub use file::FileHandle;

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;

use thiserror::Error;

use crate::meta::{Dentry, Inode};
use crate::proto::{DataError, ManagerError, Request, Response, VolumeView};
use crate::types::{
    InodeId, NodeId, PartitionDescriptor, PartitionId, Replica, Session, DEFAULT_PACKET_SIZE, DEFAULT_SMALL_FILE_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("request timed out")]
    Timeout,
    #[error("unreachable: {0}")]
    Unreachable(String),
}

/// How a client reaches the cluster. The simulator and the TCP runtime
/// each provide one; every wait goes through it so virtual time works.
pub trait Transport {
    fn call(&self, to: &Replica, req: Request, timeout_ms: u64) -> impl Future<Output = Result<Response, CallError>>;
    fn sleep(&self, ms: u64) -> impl Future<Output = ()>;
    fn now_ms(&self) -> u64;
    fn random(&self) -> u64;
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FsError {
    #[error("no such file or directory")]
    NotFound,
    #[error("file exists")]
    Exists,
    #[error("not a directory")]
    NotDirectory,
    #[error("is a directory")]
    IsDirectory,
    #[error("directory not empty")]
    NotEmpty,
    #[error("invalid name")]
    InvalidName,
    #[error("no writable partition")]
    NoWritablePartition,
    #[error("create failed, inode {0} queued for eviction")]
    OrphanRecorded(InodeId),
    #[error("write could not be committed")]
    CommitStalled,
    #[error("metadata unavailable: {0}")]
    MetaUnavailable(String),
    #[error("data unavailable: {0}")]
    DataUnavailable(String),
    #[error("data error: {0}")]
    Data(DataError),
    #[error("manager error: {0}")]
    Manager(ManagerError),
    #[error("volume {0} is not ready")]
    NotReady(String),
    #[error("file handle is read-only")]
    ReadOnlyHandle,
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub packet_size: usize,
    /// Used only when the volume view carries no threshold.
    pub small_file_threshold: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub request_timeout_ms: u64,
    /// How long a routed call keeps looking for a leader.
    pub route_budget_ms: u64,
    pub view_ttl_ms: u64,
    /// Interval for pushing dirty extent keys and evicting orphans.
    pub sync_interval_ms: u64,
    pub metadata_cache: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            packet_size: DEFAULT_PACKET_SIZE,
            small_file_threshold: DEFAULT_SMALL_FILE_THRESHOLD,
            max_retries: 3,
            backoff_ms: 50,
            request_timeout_ms: 1000,
            route_budget_ms: 4000,
            view_ttl_ms: 5000,
            sync_interval_ms: 5000,
            metadata_cache: true,
        }
    }
}

/// A create or unlink whose outcome could not be settled; left for an
/// administrator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unsettled {
    pub partition: PartitionId,
    pub session: Session,
    pub inode: Option<InodeId>,
    pub what: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub requests: u64,
    pub redirects: u64,
    pub timeouts: u64,
    pub view_refreshes: u64,
    /// Replicas tried by reads before one answered as leader.
    pub read_retries: u64,
    pub resent_bytes: u64,
}

/// One mounted volume. Each worker (process) owns its own.
pub struct MountedVolume<T: Transport> {
    t: T,
    cfg: ClientConfig,
    volume: String,
    client_id: u64,
    seq: u64,
    managers: Vec<Replica>,
    view: Option<(VolumeView, u64)>,
    leaders: BTreeMap<PartitionId, NodeId>,
    /// Partitions this client saw refuse writes since the last view fetch.
    unwritable: BTreeSet<PartitionId>,
    inodes: BTreeMap<InodeId, Inode>,
    dentries: BTreeMap<(InodeId, String), Dentry>,
    /// Released inodes waiting for eviction.
    orphans: BTreeSet<InodeId>,
    unsettled: Vec<Unsettled>,
    last_sync: u64,
    pub stats: ClientStats,
}

impl<T: Transport> MountedVolume<T> {
    /// Mounts `volume` given the addresses of the manager replicas. Waits
    /// until the volume's root directory exists.
    /// A handle that can only run manager operations; used before any
    /// volume exists.
    pub fn admin_client(t: T, managers: Vec<Replica>, cfg: ClientConfig, client_id: u64) -> Self {
        Self::unmounted(t, managers, "", cfg, client_id)
    }

    fn unmounted(t: T, managers: Vec<Replica>, volume: &str, cfg: ClientConfig, client_id: u64) -> Self {
        let now = t.now_ms();
        Self {
            t,
            cfg,
            volume: volume.to_string(),
            client_id,
            seq: 0,
            managers,
            view: None,
            leaders: BTreeMap::new(),
            unwritable: BTreeSet::new(),
            inodes: BTreeMap::new(),
            dentries: BTreeMap::new(),
            orphans: BTreeSet::new(),
            unsettled: Vec::new(),
            last_sync: now,
            stats: ClientStats::default(),
        }
    }

    /// Mounts `volume` given the addresses of the manager replicas. Waits
    /// until the volume's root directory exists.
    pub async fn mount(t: T, managers: Vec<Replica>, volume: &str, cfg: ClientConfig, client_id: u64) -> Result<Self, FsError> {
        let now = t.now_ms();
        let mut v = Self::unmounted(t, managers, volume, cfg, client_id);
        let deadline = now + 30_000;
        loop {
            match v.refresh_view().await {
                Ok(()) if v.view.as_ref().is_some_and(|(w, _)| w.root_ready) => return Ok(v),
                Err(e @ FsError::Manager(ManagerError::NotFound)) => return Err(e),
                Ok(()) | Err(_) if v.t.now_ms() < deadline => v.t.sleep(100).await,
                Ok(()) => return Err(FsError::NotReady(v.volume.clone())),
                Err(e) => return Err(e),
            }
        }
    }

    pub fn client_id(&self) -> u64 {
        self.client_id
    }

    pub fn volume(&self) -> &str {
        &self.volume
    }

    pub fn transport(&self) -> &T {
        &self.t
    }

    /// Inodes released but not yet evicted.
    pub fn orphans(&self) -> &BTreeSet<InodeId> {
        &self.orphans
    }

    /// Operations whose outcome is unknown and left for an administrator.
    pub fn unsettled(&self) -> &[Unsettled] {
        &self.unsettled
    }

    pub fn cached_view(&self) -> Option<&VolumeView> {
        self.view.as_ref().map(|(v, _)| v)
    }

    fn next_session(&mut self) -> Session {
        self.seq += 1;
        Session { client: self.client_id, seq: self.seq }
    }

    fn small_threshold(&self) -> u64 {
        self.view.as_ref().map_or(self.cfg.small_file_threshold, |(v, _)| v.small_file_threshold)
    }

    async fn view(&mut self) -> Result<&VolumeView, FsError> {
        let stale = match &self.view {
            Some((_, at)) => self.t.now_ms() >= at + self.cfg.view_ttl_ms,
            None => true,
        };
        if stale {
            if let Err(e) = self.refresh_view().await {
                if self.view.is_none() {
                    return Err(e);
                }
            }
        }
        Ok(&self.view.as_ref().unwrap().0)
    }

    fn meta_partition_for(&self, ino: InodeId) -> Option<PartitionDescriptor> {
        let (v, _) = self.view.as_ref()?;
        v.meta.iter().find(|p| p.contains_inode(ino)).cloned()
    }

    fn data_partition(&self, pid: PartitionId) -> Option<PartitionDescriptor> {
        let (v, _) = self.view.as_ref()?;
        v.data.iter().find(|p| p.id == pid).cloned()
    }

    fn random_index(&self, n: usize) -> usize {
        (self.t.random() % n as u64) as usize
    }

    fn cache_dentry(&mut self, d: &Dentry) {
        if self.cfg.metadata_cache {
            self.dentries.insert((d.parent, d.name.clone()), d.clone());
        }
    }

    fn forget_dentry(&mut self, parent: InodeId, name: &str) {
        self.dentries.remove(&(parent, name.to_string()));
    }

    /// Drops every cached dentry and inode.
    pub fn drop_caches(&mut self) {
        self.dentries.clear();
        self.inodes.clear();
    }

    /// Periodic work: evicting orphans. Called at the start of operations.
    async fn maybe_background(&mut self) {
        let now = self.t.now_ms();
        if now >= self.last_sync + self.cfg.sync_interval_ms {
            self.last_sync = now;
            self.evict_orphans().await;
        }
    }

    /// Evicts every pending orphan now: frees its data, then removes the
    /// inode. Orphans that cannot be evicted yet stay queued.
    pub async fn evict_orphans(&mut self) {
        let list: Vec<InodeId> = self.orphans.iter().copied().collect();
        for ino in list {
            if self.evict_one(ino).await.is_ok() {
                self.orphans.remove(&ino);
            }
        }
    }
}
