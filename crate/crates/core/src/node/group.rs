//! One replication group hosted on a node and the state machine it drives.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::DataState;
use super::mgr::ManagerState;
use super::Envelope;
use crate::extent::ExtentImage;
use crate::manager::ClusterState;
use crate::meta::MetaPartition;
use crate::proto::{Command, CommandBody, DataOp, DataReply, DataError, Message, MetaOp, MetaReply, Response};
use crate::raft::{Entry, RaftCore};
use crate::sessions::{Check, Sessions};
use crate::types::{Endpoint, GroupId, PartitionDescriptor, PartitionStatus, Session};
use crate::meta::MetaError;

pub(crate) enum Sm {
    Meta(MetaPartition),
    Data(Box<DataState>),
    Manager(Box<ManagerState>),
}

/// Raft snapshot payload: the state machine image plus the session table.
#[derive(Serialize, Deserialize)]
struct SnapshotImage {
    sm: Vec<u8>,
    sessions: Sessions,
    status: Option<PartitionStatus>,
}

struct Waiter {
    to: Endpoint,
    rid: u64,
    term: u64,
}

/// Where a committed entry's reply goes besides a waiting client.
pub(crate) enum Applied {
    Split { partition: u64, result: Response },
}

pub(crate) struct Group {
    pub id: GroupId,
    pub raft: RaftCore,
    pub sm: Sm,
    pub applied: u64,
    pub sessions: Sessions,
    waiters: BTreeMap<u64, Waiter>,
    /// Descriptor the group was created from (range before any split).
    pub initial: Option<PartitionDescriptor>,
    pub item_limit: u64,
}

impl Group {
    pub fn new(id: GroupId, raft: RaftCore, sm: Sm, initial: Option<PartitionDescriptor>, item_limit: u64) -> Self {
        let applied = raft.log().snapshot_meta().index;
        let mut g = Self { id, raft, sm, applied, sessions: Sessions::default(), waiters: BTreeMap::new(), initial, item_limit };
        if let Some(snap) = g.raft.log().snapshot().map(<[u8]>::to_vec) {
            if !matches!(g.sm, Sm::Data(_)) {
                g.load_snapshot(&snap);
            }
        }
        g
    }

    pub fn desc_kind_is_data(&self) -> bool {
        matches!(self.sm, Sm::Data(_))
    }

    pub fn meta(&self) -> Option<&MetaPartition> {
        match &self.sm {
            Sm::Meta(m) => Some(m),
            _ => None,
        }
    }

    pub fn data(&self) -> Option<&DataState> {
        match &self.sm {
            Sm::Data(d) => Some(d),
            _ => None,
        }
    }

    pub fn data_mut(&mut self) -> Option<&mut DataState> {
        match &mut self.sm {
            Sm::Data(d) => Some(d),
            _ => None,
        }
    }

    pub fn mgr(&self) -> Option<&ManagerState> {
        match &self.sm {
            Sm::Manager(m) => Some(m),
            _ => None,
        }
    }

    pub fn mgr_mut(&mut self) -> Option<&mut ManagerState> {
        match &mut self.sm {
            Sm::Manager(m) => Some(m),
            _ => None,
        }
    }

    /// Proposes a command, remembering who to answer once it applies.
    pub fn propose(&mut self, now: u64, cmd: &Command, reply_to: Option<(Endpoint, u64)>) -> bool {
        let data = bincode::serialize(cmd).expect("serialize command");
        match self.raft.propose(now, data) {
            Some(index) => {
                if let Some((to, rid)) = reply_to {
                    self.waiters.insert(index, Waiter { to, rid, term: self.raft.term() });
                }
                true
            }
            None => false,
        }
    }

    /// Whether a client-visible read can be served here right now.
    pub fn readable(&self, now: u64) -> bool {
        self.raft.can_read(now) && self.applied == self.raft.commit_index()
    }

    /// Session pre-check at the leader: a duplicate gets its cached reply.
    pub fn precheck(&self, session: Option<Session>) -> Option<Response> {
        match session.map(|s| self.sessions.peek(s)) {
            Some(Check::Cached(r)) => Some(r),
            Some(Check::Fenced) => Some(Response::Fenced),
            _ => None,
        }
    }

    fn snapshot_bytes(&self) -> Vec<u8> {
        let (sm, status) = match &self.sm {
            Sm::Meta(m) => (m.snapshot(), Some(m.status)),
            Sm::Data(d) => (bincode::serialize(&d.part.export(&BTreeMap::new()).unwrap_or_default()).unwrap(), None),
            Sm::Manager(m) => (bincode::serialize(&m.cluster).unwrap(), None),
        };
        bincode::serialize(&SnapshotImage { sm, sessions: self.sessions.clone(), status }).unwrap()
    }

    fn load_snapshot(&mut self, bytes: &[u8]) {
        let Ok(env) = bincode::deserialize::<SnapshotImage>(bytes) else {
            log::error!("group {}: undecodable snapshot", self.id);
            return;
        };
        match &mut self.sm {
            Sm::Meta(m) => match MetaPartition::restore(&env.sm) {
                Ok(mut r) => {
                    r.item_limit = self.item_limit;
                    if let Some(s) = env.status {
                        r.status = s;
                    }
                    *m = r;
                }
                Err(e) => log::error!("group {}: {e}", self.id),
            },
            Sm::Data(d) => {
                let images: Vec<ExtentImage> = bincode::deserialize(&env.sm).unwrap_or_default();
                if let Err(e) = d.part.install(&images) {
                    log::error!("group {}: snapshot install failed: {e}", self.id);
                }
            }
            Sm::Manager(m) => {
                if let Ok(c) = bincode::deserialize::<ClusterState>(&env.sm) {
                    m.cluster = c;
                }
            }
        }
        self.sessions = env.sessions;
        self.applied = self.raft.log().snapshot_meta().index;
    }

    /// Rebuilds volatile state as after a process restart: the log and hard
    /// state survive, meta and manager state machines are replayed from the
    /// snapshot, data extents survive as they are on disk.
    pub fn restart(&mut self, now: u64, fresh_sm: Option<Sm>) {
        self.raft.restart(now);
        self.waiters.clear();
        match &mut self.sm {
            Sm::Data(d) => {
                d.restart();
                self.sessions = Sessions::default();
            }
            _ => {
                if let Some(sm) = fresh_sm {
                    self.sm = sm;
                }
                self.sessions = Sessions::default();
                self.applied = 0;
                if let Some(snap) = self.raft.log().snapshot().map(<[u8]>::to_vec) {
                    self.load_snapshot(&snap);
                }
            }
        }
    }

    /// Applies newly committed entries, answers waiters, and drains raft
    /// output into `out`. Returns side effects the node must act on.
    pub fn advance(&mut self, _now: u64, out: &mut Vec<Envelope>, snapshot_entries: usize, data_dir: Option<&Path>) -> Vec<Applied> {
        let mut effects = Vec::new();
        if let Some((_, data)) = self.raft.take_installed_snapshot() {
            self.load_snapshot(&data);
            self.waiters = self.waiters.split_off(&(self.applied + 1));
        }
        let paused = self.data().is_some_and(|d| d.apply_paused());
        while !paused && self.applied < self.raft.commit_index() {
            let idx = self.applied + 1;
            let Some(entry) = self.raft.entry(idx).cloned() else { break };
            let resp = self.apply_entry(&entry, &mut effects);
            self.applied = idx;
            if let Some(w) = self.waiters.remove(&idx) {
                let resp = if w.term == entry.term { resp } else { None };
                let resp = resp.unwrap_or(Response::NotLeader { hint: self.raft.leader() });
                out.push(Envelope { to: w.to, msg: Message::Response { rid: w.rid, resp } });
            }
        }
        if let (Some(dir), true) = (data_dir, self.desc_kind_is_data()) {
            let _ = std::fs::write(dir.join(format!("g{}.applied", self.id)), self.applied.to_le_bytes());
        }
        if !self.raft.is_leader() && !self.waiters.is_empty() {
            let hint = self.raft.leader();
            for (_, w) in std::mem::take(&mut self.waiters) {
                out.push(Envelope { to: w.to, msg: Message::Response { rid: w.rid, resp: Response::NotLeader { hint } } });
            }
        }
        if self.raft.log().len() > snapshot_entries && self.applied > self.raft.log().snapshot_meta().index {
            let snap = self.snapshot_bytes();
            self.raft.compact(self.applied, snap);
        }
        let group = self.id;
        for (to, msg) in self.raft.take_messages() {
            out.push(Envelope { to: Endpoint::Node(to), msg: Message::Raft { group, msg } });
        }
        effects
    }

    fn apply_entry(&mut self, e: &Entry, effects: &mut Vec<Applied>) -> Option<Response> {
        if e.data.is_empty() {
            return None;
        }
        let cmd: Command = match bincode::deserialize(&e.data) {
            Ok(c) => c,
            Err(err) => {
                log::error!("group {}: undecodable entry {}: {err}", self.id, e.index);
                return None;
            }
        };
        if let CommandBody::Resolve { seq } = cmd.body {
            let s = Session { client: cmd.session.map_or(0, |s| s.client), seq };
            return Some(Response::Resolved(self.sessions.resolve(s).map(Box::new)));
        }
        if let Some(s) = cmd.session {
            match self.sessions.check(s, cmd.ack_below) {
                Check::Cached(r) => return Some(r),
                Check::Fenced => return Some(Response::Fenced),
                Check::Fresh => {}
            }
        }
        let now = cmd.now;
        let resp = match (&mut self.sm, cmd.body) {
            (Sm::Meta(m), CommandBody::Meta(op)) => Response::Meta(apply_meta(m, op, now)),
            (Sm::Data(d), CommandBody::Data(op)) => Response::Data(apply_data(d, op)),
            (Sm::Manager(m), CommandBody::Manager(c)) => {
                let split = match &c {
                    crate::proto::ManagerCmd::Split { partition, .. } => Some(*partition),
                    _ => None,
                };
                let r = Response::Admin(m.cluster.apply(now, &c));
                if let Some(partition) = split {
                    m.split_applied(partition);
                    effects.push(Applied::Split { partition, result: r.clone() });
                }
                r
            }
            _ => {
                log::error!("group {}: command for another state machine kind", self.id);
                return None;
            }
        };
        if let Some(s) = cmd.session {
            self.sessions.record(s, &resp);
        }
        Some(resp)
    }
}

pub(crate) fn apply_meta(m: &mut MetaPartition, op: MetaOp, now: u64) -> Result<MetaReply, MetaError> {
    match op {
        MetaOp::CreateInode { kind, link_target } => m.create_inode(kind, link_target, now).map(MetaReply::Inode),
        MetaOp::CreateRoot => m.create_root(now).map(MetaReply::Inode),
        MetaOp::CreateDentry { parent, name, child, kind } => m.create_dentry(parent, &name, child, kind, now).map(|_| MetaReply::Done),
        MetaOp::DeleteDentry { parent, name } => m.delete_dentry(parent, &name, now).map(MetaReply::Dentry),
        MetaOp::Link { ino } => m.link(ino, now).map(MetaReply::Nlink),
        MetaOp::UnlinkInode { ino } => m.unlink_inode(ino, now).map(MetaReply::Nlink),
        MetaOp::AdjustDirLinks { ino, delta } => m.adjust_dir_links(ino, delta, now).map(MetaReply::Nlink),
        MetaOp::Evict { ino } => m.evict_inode(ino).map(MetaReply::Inode),
        MetaOp::AppendExtentKeys { ino, keys, small } => m.append_extent_keys(ino, &keys, small, now).map(MetaReply::Displaced),
        MetaOp::ApplySplit { end } => m.apply_split(end).map(|_| MetaReply::Done),
        MetaOp::SetStatus { status } => {
            m.set_status(status);
            Ok(MetaReply::Done)
        }
        read => meta_read(m, &read),
    }
}

pub(crate) fn meta_read(m: &MetaPartition, op: &MetaOp) -> Result<MetaReply, MetaError> {
    match op {
        MetaOp::Lookup { parent, name } => m.lookup(*parent, name).map(MetaReply::Dentry),
        MetaOp::ReadDir { parent } => m.read_dir(*parent).map(MetaReply::Dentries),
        MetaOp::GetInode { ino } => m.get_inode(*ino).map(MetaReply::Inode),
        MetaOp::BatchInodeGet { ids } => {
            let (found, missing) = m.batch_inode_get(ids);
            Ok(MetaReply::Inodes { found, missing })
        }
        _ => Err(MetaError::NotFound),
    }
}

fn apply_data(d: &mut DataState, op: DataOp) -> Result<DataReply, DataError> {
    match op {
        DataOp::Overwrite { extent, offset, data } => d.part.apply_overwrite(extent, offset, &data).map(|_| DataReply::Done).map_err(Into::into),
        DataOp::DeleteContent { extent, offset, len } => match d.part.delete_file_content(extent, offset, len) {
            Ok(()) | Err(crate::extent::ExtentError::NotFound) => Ok(DataReply::Done),
            // Punching an already punched range again.
            Err(crate::extent::ExtentError::InvalidRange) => Ok(DataReply::Done),
            Err(e) => Err(e.into()),
        },
    }
}
