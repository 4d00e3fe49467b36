//! Leader routing, retries and the view cache.

use super::{FsError, MountedVolume, Transport};
use crate::meta::MetaError;
use crate::proto::{AdminOp, AdminReply, DataError, ManagerError, MetaOp, MetaReply, Request, Response};
use crate::types::{InodeId, PartitionDescriptor, PartitionId, Replica, Session, MANAGER_GROUP};

pub(super) enum Routed {
    Reply(Response),
    /// No replica hosts the partition any more; the view is stale.
    Stale,
    /// Gave up; a mutation may or may not have been applied.
    Failed(String),
}

/// A mutation whose outcome is unknown.
pub(super) struct Failure {
    pub partition: PartitionId,
    pub reason: String,
}

impl From<Failure> for FsError {
    fn from(f: Failure) -> Self {
        FsError::MetaUnavailable(format!("partition {}: {}", f.partition, f.reason))
    }
}

pub(super) fn meta_err(e: MetaError) -> FsError {
    match e {
        MetaError::NotFound => FsError::NotFound,
        MetaError::DentryExists => FsError::Exists,
        MetaError::NotDirectory => FsError::NotDirectory,
        MetaError::IsDirectory => FsError::IsDirectory,
        MetaError::DirectoryNotEmpty => FsError::NotEmpty,
        MetaError::InvalidName => FsError::InvalidName,
        MetaError::PartitionReadOnly | MetaError::RangeExhausted => FsError::NoWritablePartition,
        e => FsError::MetaUnavailable(e.to_string()),
    }
}

const MAX_BACKOFF_MS: u64 = 800;

impl<T: Transport> MountedVolume<T> {
    /// Sends `req` to the leader of `group`, following redirects and
    /// trying replicas in turn until one answers or the budget runs out.
    pub(super) async fn route(&mut self, group: PartitionId, replicas: &[Replica], req: &Request) -> Routed {
        let n = replicas.len();
        if n == 0 {
            return Routed::Stale;
        }
        let start = self.t.now_ms();
        let mut idx = self.random_index(n);
        let mut backoff = self.cfg.backoff_ms;
        let mut missing = 0;
        let mut hops = 0;
        loop {
            let cached = self.leaders.get(&group).and_then(|l| replicas.iter().position(|r| r.node == *l));
            let pos = cached.unwrap_or(idx % n);
            let target = &replicas[pos];
            self.stats.requests += 1;
            let res = self.t.call(target, req.clone(), self.cfg.request_timeout_ms).await;
            let mut wait = false;
            match res {
                Ok(Response::NotLeader { hint }) => {
                    self.stats.redirects += 1;
                    hops += 1;
                    match hint.filter(|h| *h != target.node && replicas.iter().any(|r| r.node == *h)) {
                        Some(h) => {
                            self.leaders.insert(group, h);
                        }
                        None => {
                            self.leaders.remove(&group);
                            idx = pos + 1;
                        }
                    }
                    if hops >= n {
                        hops = 0;
                        wait = true;
                    }
                }
                Ok(Response::Busy(_)) | Ok(Response::Data(Err(DataError::Recovering))) => wait = true,
                Ok(Response::NoSuchPartition) => {
                    self.leaders.remove(&group);
                    idx = pos + 1;
                    missing += 1;
                    if missing >= n {
                        return Routed::Stale;
                    }
                }
                Ok(r) => {
                    self.leaders.insert(group, target.node);
                    return Routed::Reply(r);
                }
                Err(e) => {
                    log::debug!("group {group}: {} did not answer: {e}", target.node);
                    self.stats.timeouts += 1;
                    self.leaders.remove(&group);
                    idx = pos + 1;
                    wait = true;
                }
            }
            if self.t.now_ms() >= start + self.cfg.route_budget_ms {
                return Routed::Failed(format!("no leader answered for group {group}"));
            }
            if wait {
                self.t.sleep(backoff).await;
                backoff = (backoff * 2).min(MAX_BACKOFF_MS);
            }
        }
    }

    pub async fn refresh_view(&mut self) -> Result<(), FsError> {
        self.stats.view_refreshes += 1;
        match self.admin(AdminOp::GetView { volume: self.volume.clone() }).await? {
            AdminReply::View(v) => {
                for p in v.meta.iter().chain(&v.data) {
                    if let Some(h) = p.leader_hint {
                        self.leaders.entry(p.id).or_insert(h);
                    }
                }
                self.view = Some((v, self.t.now_ms()));
                self.unwritable.clear();
                Ok(())
            }
            other => Err(FsError::MetaUnavailable(format!("unexpected view reply {other:?}"))),
        }
    }

    /// Runs a resource-manager operation on the manager leader.
    pub async fn admin(&mut self, op: AdminOp) -> Result<AdminReply, FsError> {
        let mutating =
            !matches!(op, AdminOp::GetView { .. } | AdminOp::VolumeInfo { .. } | AdminOp::ListNodes | AdminOp::ListPartitions { .. });
        let session = mutating.then(|| self.next_session());
        let managers = self.managers.clone();
        let req = Request::Admin { session, op };
        for attempt in 0..=self.cfg.max_retries {
            match self.route(MANAGER_GROUP, &managers, &req).await {
                Routed::Reply(Response::Admin(r)) => return r.map_err(FsError::Manager),
                Routed::Reply(other) => return Err(FsError::MetaUnavailable(format!("unexpected manager reply {other:?}"))),
                Routed::Stale => return Err(FsError::Manager(ManagerError::NotFound)),
                Routed::Failed(reason) if attempt == self.cfg.max_retries => return Err(FsError::MetaUnavailable(reason)),
                Routed::Failed(_) => self.t.sleep(self.cfg.backoff_ms << attempt).await,
            }
        }
        unreachable!()
    }

    /// Runs `op` on a specific meta partition. Mutations carry a session so
    /// resending is safe; `Err` means the outcome is unknown.
    pub(super) async fn meta_on(
        &mut self,
        desc: &PartitionDescriptor,
        op: MetaOp,
        session: Option<Session>,
    ) -> Result<Result<MetaReply, MetaError>, Failure> {
        let req = Request::Meta { partition: desc.id, session, ack_below: session.map_or(0, |s| s.seq), op };
        let mut reason = String::new();
        for attempt in 0..=self.cfg.max_retries {
            match self.route(desc.id, &desc.replicas, &req).await {
                Routed::Reply(Response::Meta(r)) => return Ok(r),
                Routed::Reply(Response::Fenced) => return Err(Failure { partition: desc.id, reason: "fenced".into() }),
                Routed::Reply(other) => reason = format!("unexpected reply {other:?}"),
                Routed::Stale => {
                    reason = "partition moved".into();
                    break;
                }
                Routed::Failed(r) => reason = r,
            }
            if attempt < self.cfg.max_retries {
                self.t.sleep(self.cfg.backoff_ms << attempt).await;
            }
        }
        Err(Failure { partition: desc.id, reason })
    }

    /// Runs `op` on the meta partition owning `ino`, refreshing a stale
    /// view once.
    pub(super) async fn meta_at(&mut self, ino: InodeId, op: MetaOp) -> Result<MetaReply, FsError> {
        let session = (!op.is_read()).then(|| self.next_session());
        let mut refreshed = false;
        loop {
            self.view().await?;
            let Some(desc) = self.meta_partition_for(ino) else {
                if refreshed {
                    return Err(FsError::NotFound);
                }
                refreshed = true;
                self.refresh_view().await?;
                continue;
            };
            match self.meta_on(&desc, op.clone(), session).await {
                Ok(Err(MetaError::OutOfRange(_))) if !refreshed => {
                    refreshed = true;
                    self.refresh_view().await?;
                }
                Ok(r) => return r.map_err(meta_err),
                Err(f) if !refreshed && f.reason == "partition moved" => {
                    refreshed = true;
                    self.refresh_view().await?;
                }
                Err(f) => return Err(f.into()),
            }
        }
    }

    /// Settles an unknown outcome: `Some(Some(r))` if the request was
    /// applied with reply `r`, `Some(None)` if it never will be, `None`
    /// if the partition could not be reached.
    pub(super) async fn resolve(&mut self, desc: &PartitionDescriptor, session: Session) -> Option<Option<Response>> {
        let req = Request::Resolve { partition: desc.id, session };
        for attempt in 0..=self.cfg.max_retries {
            if let Routed::Reply(Response::Resolved(r)) = self.route(desc.id, &desc.replicas, &req).await {
                return Some(r.map(|b| *b));
            }
            self.t.sleep(self.cfg.backoff_ms << attempt).await;
        }
        None
    }
}
