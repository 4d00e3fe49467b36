//! A storage or manager node as a sans-IO state machine. The host (the
//! simulator or the TCP runtime) delivers messages and clock ticks and sends
//! whatever envelopes come back.

mod data;
mod group;
mod mgr;

pub use data::{DataState, Recovery};
pub use mgr::ManagerState;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use crate::extent::{DataPartition, DEFAULT_EXTENT_LIMIT};
use crate::manager::{ClusterState, ManagerConfig};
use crate::meta::{MetaPartition, DEFAULT_ITEM_LIMIT};
use crate::proto::{
    AdminOp, Command, CommandBody, DataError, DataOp, DataReply, ManagerCmd, Message, MetaOp, NodeReport, NodeSpec,
    PartitionReport, Request, Response,
};
use crate::raft::{LogStore, RaftConfig, RaftCore};
use crate::sessions::Sessions;
use crate::types::{
    Endpoint, GroupId, NodeId, NodeKind, PartitionDescriptor, PartitionKind, PartitionStatus, Replica, MANAGER_GROUP,
};
use group::{Applied, Group, Sm};

/// A message addressed to an endpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub to: Endpoint,
    pub msg: Message,
}

#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub raft: RaftConfig,
    pub heartbeat_ms: u64,
    pub report_ms: u64,
    /// How long the chain head waits for an append acknowledgement.
    pub pb_timeout_ms: u64,
    pub align_retry_ms: u64,
    /// Log length that triggers a snapshot and truncation.
    pub snapshot_entries: usize,
    pub meta_item_limit: u64,
    pub extent_limit: u64,
    pub manager: ManagerConfig,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            raft: RaftConfig::default(),
            heartbeat_ms: 100,
            report_ms: 500,
            pb_timeout_ms: 300,
            align_retry_ms: 500,
            snapshot_entries: 10_000,
            meta_item_limit: DEFAULT_ITEM_LIMIT,
            extent_limit: DEFAULT_EXTENT_LIMIT,
            manager: ManagerConfig::default(),
        }
    }
}

/// Rough memory charged per metadata item when a meta node reports usage.
const META_ITEM_BYTES: u64 = 512;

pub struct ServerNode {
    pub spec: NodeSpec,
    cfg: NodeConfig,
    topology: Vec<NodeSpec>,
    set_peers: BTreeSet<NodeId>,
    managers: Vec<NodeId>,
    groups: BTreeMap<GroupId, Group>,
    dir: Option<PathBuf>,
    seed: u64,
    last_heartbeat: u64,
    last_report: u64,
    out: Vec<Envelope>,
}

impl ServerNode {
    /// `topology` lists every node the cluster starts with; manager nodes
    /// host the manager group. With `dir`, logs and extents live on disk and
    /// previously hosted partitions are reopened.
    pub fn new(spec: NodeSpec, topology: &[NodeSpec], cfg: NodeConfig, dir: Option<PathBuf>, now: u64, seed: u64) -> Self {
        let set_peers = topology.iter().filter(|n| n.raft_set == spec.raft_set && n.id != spec.id).map(|n| n.id).collect();
        let mut managers: Vec<NodeId> = topology.iter().filter(|n| n.kind == NodeKind::Manager).map(|n| n.id).collect();
        managers.sort();
        let mut node = Self {
            spec,
            cfg,
            topology: topology.to_vec(),
            set_peers,
            managers,
            groups: BTreeMap::new(),
            dir,
            seed,
            last_heartbeat: 0,
            last_report: 0,
            out: Vec::new(),
        };
        if node.spec.kind == NodeKind::Manager {
            let log = node.open_log(MANAGER_GROUP);
            let fresh = log.last_index() == 0 && log.term() == 0;
            let raft = RaftCore::new(MANAGER_GROUP, node.spec.id, node.managers.clone(), log, node.cfg.raft.clone(), now, seed);
            let sm = node.fresh_manager();
            let mut g = Group::new(MANAGER_GROUP, raft, sm, None, 0);
            if fresh && node.managers.first() == Some(&node.spec.id) {
                g.raft.campaign(now);
            }
            node.groups.insert(MANAGER_GROUP, g);
        }
        node.reopen(now);
        node
    }

    pub fn id(&self) -> NodeId {
        self.spec.id
    }

    fn fresh_manager(&self) -> Sm {
        Sm::Manager(Box::new(ManagerState::new(ClusterState::new(self.cfg.manager.clone(), self.topology.clone()))))
    }

    fn open_log(&self, group: GroupId) -> LogStore {
        match &self.dir {
            Some(d) => LogStore::open(&d.join("raft"), &format!("g{group}")).expect("open raft log"),
            None => LogStore::memory(),
        }
    }

    fn manifest_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("partitions.json"))
    }

    fn save_manifest(&self) {
        if let Some(p) = self.manifest_path() {
            let descs: Vec<&PartitionDescriptor> = self.groups.values().filter_map(|g| g.initial.as_ref()).collect();
            let tmp = p.with_extension("tmp");
            if std::fs::write(&tmp, serde_json::to_vec_pretty(&descs).unwrap()).is_ok() {
                let _ = std::fs::rename(tmp, p);
            }
        }
    }

    fn reopen(&mut self, now: u64) {
        let Some(p) = self.manifest_path() else { return };
        let Ok(bytes) = std::fs::read(&p) else { return };
        let descs: Vec<PartitionDescriptor> = match serde_json::from_slice(&bytes) {
            Ok(d) => d,
            Err(e) => {
                log::error!("{}: unreadable partition manifest: {e}", self.spec.id);
                return;
            }
        };
        for d in descs {
            self.host(now, d, true);
        }
    }

    fn new_sm(&self, desc: &PartitionDescriptor, recovering: bool) -> Sm {
        match desc.kind {
            PartitionKind::Meta => {
                let mut m = MetaPartition::new(desc.id, desc.volume.clone(), desc.start, desc.end);
                m.item_limit = self.cfg.meta_item_limit;
                Sm::Meta(m)
            }
            PartitionKind::Data => {
                let mut part = match &self.dir {
                    Some(d) => DataPartition::open_dir(desc.id, desc.volume.clone(), desc.nodes(), &d.join(format!("p{}", desc.id)))
                        .expect("open data partition"),
                    None => DataPartition::new(desc.id, desc.volume.clone(), desc.nodes()),
                };
                part.extent_limit = self.cfg.extent_limit;
                part.status = desc.status;
                Sm::Data(Box::new(DataState::new(part, recovering)))
            }
        }
    }

    /// Starts hosting a partition. `reopen` means it existed before a
    /// restart and must recover.
    fn host(&mut self, now: u64, desc: PartitionDescriptor, reopen: bool) {
        if self.groups.contains_key(&desc.id) || !desc.nodes().contains(&self.spec.id) {
            return;
        }
        let log = self.open_log(desc.id);
        let fresh = log.last_index() == 0 && log.term() == 0;
        let raft = RaftCore::new(desc.id, self.spec.id, desc.nodes(), log, self.cfg.raft.clone(), now, self.seed);
        let sm = self.new_sm(&desc, reopen && desc.replicas.len() > 1);
        let mut g = Group::new(desc.id, raft, sm, Some(desc.clone()), self.cfg.meta_item_limit);
        if desc.kind == PartitionKind::Data && reopen {
            if let Some(d) = &self.dir {
                if let Ok(b) = std::fs::read(d.join(format!("g{}.applied", desc.id))) {
                    if let Ok(arr) = <[u8; 8]>::try_from(b.as_slice()) {
                        g.applied = u64::from_le_bytes(arr).max(g.applied);
                    }
                }
            }
        }
        if fresh && desc.replicas[0].node == self.spec.id {
            g.raft.campaign(now);
        }
        self.groups.insert(desc.id, g);
        self.save_manifest();
    }

    /// Drops every piece of volatile state, as a crash followed by a
    /// restart would. Durable state (logs, extents) is kept.
    pub fn restart(&mut self, now: u64) {
        self.out.clear();
        let ids: Vec<GroupId> = self.groups.keys().copied().collect();
        for id in ids {
            let fresh = {
                let g = &self.groups[&id];
                match (&g.sm, &g.initial) {
                    (Sm::Meta(_), Some(d)) => Some(self.new_sm(d, false)),
                    (Sm::Manager(_), _) => Some(self.fresh_manager()),
                    _ => None,
                }
            };
            self.groups.get_mut(&id).unwrap().restart(now, fresh);
        }
        self.last_heartbeat = now;
        self.last_report = now;
    }

    fn send(&mut self, to: Endpoint, msg: Message) {
        self.out.push(Envelope { to, msg });
    }

    fn respond(&mut self, to: Endpoint, rid: u64, resp: Response) {
        self.send(to, Message::Response { rid, resp });
    }

    pub fn handle(&mut self, now: u64, from: Endpoint, msg: Message) -> Vec<Envelope> {
        let touched = self.dispatch(now, from, msg);
        if let Some(g) = touched {
            self.advance(now, g);
        }
        std::mem::take(&mut self.out)
    }

    fn dispatch(&mut self, now: u64, from: Endpoint, msg: Message) -> Option<GroupId> {
        let peer = match from {
            Endpoint::Node(n) => Some(n),
            Endpoint::Client(_) => None,
        };
        match msg {
            Message::Raft { group, msg } => {
                let g = self.groups.get_mut(&group)?;
                g.raft.step(now, peer?, msg);
                Some(group)
            }
            Message::Heartbeat { leading, following } => {
                let p = peer?;
                for (gid, term, commit) in leading {
                    if let Some(g) = self.groups.get_mut(&gid) {
                        if g.raft.members().contains(&p) {
                            g.raft.on_heartbeat(now, p, term, commit);
                            self.advance(now, gid);
                        }
                    }
                }
                for (gid, term, matched) in following {
                    if let Some(g) = self.groups.get_mut(&gid) {
                        g.raft.on_heartbeat_ack(now, p, term, matched);
                        self.advance(now, gid);
                    }
                }
                None
            }
            Message::Request { rid, req } => self.request(now, from, rid, req),
            Message::Response { rid, resp } => {
                let g = self.groups.get_mut(&MANAGER_GROUP)?;
                mgr::on_response(g, now, rid, resp);
                Some(MANAGER_GROUP)
            }
            Message::PbForward { partition, extent, kind, offset, data, seq } => {
                let me = self.spec.id;
                match self.groups.get_mut(&partition).and_then(Group::data_mut) {
                    Some(d) => d.forward(me, peer?, extent, kind, offset, data, seq, &mut self.out),
                    None => self.send(from, Message::PbAck { partition, extent, end: offset, seq, ok: false }),
                }
                None
            }
            Message::PbAck { partition, extent, end, seq, ok } => {
                let me = self.spec.id;
                if let Some(d) = self.groups.get_mut(&partition).and_then(Group::data_mut) {
                    d.ack(me, extent, end, seq, ok, &mut self.out);
                }
                None
            }
            Message::AlignRequest { partition, have } => {
                let images = self.groups.get(&partition).and_then(Group::data).and_then(|d| d.align_request(&have));
                self.send(from, Message::AlignResponse { partition, images });
                None
            }
            Message::AlignResponse { partition, images } => {
                let d = self.groups.get_mut(&partition).and_then(Group::data_mut)?;
                d.align_response(images);
                Some(partition)
            }
            Message::Report(report) => {
                let g = self.groups.get_mut(&MANAGER_GROUP)?;
                mgr::on_report(g, now, report);
                Some(MANAGER_GROUP)
            }
            Message::CreatePartition(desc) => {
                self.host(now, desc, false);
                None
            }
            Message::SetPartitionStatus { partition, status } => {
                let g = self.groups.get_mut(&partition)?;
                match &mut g.sm {
                    Sm::Data(d) => d.part.status = status,
                    Sm::Meta(m) if g.raft.is_leader() && m.status != status => {
                        let cmd = Command { session: None, ack_below: 0, now, body: CommandBody::Meta(MetaOp::SetStatus { status }) };
                        g.propose(now, &cmd, None);
                    }
                    _ => {}
                }
                Some(partition)
            }
            Message::Hello { .. } => None,
        }
    }

    fn not_leader(g: &Group) -> Response {
        Response::NotLeader { hint: g.raft.leader().filter(|&l| l != g.raft.id) }
    }

    fn request(&mut self, now: u64, from: Endpoint, rid: u64, req: Request) -> Option<GroupId> {
        if let Request::Discover = req {
            let list = self.managers.iter().map(|id| Replica { node: *id, addr: self.addr_of(*id) }).collect();
            self.respond(from, rid, Response::Managers(list));
            return None;
        }
        let gid = match &req {
            Request::Admin { .. } => MANAGER_GROUP,
            r => r.partition().expect("partition request"),
        };
        let me = self.spec.id;
        let timeout = self.cfg.pb_timeout_ms;
        let Some(g) = self.groups.get_mut(&gid) else {
            self.respond(from, rid, Response::NoSuchPartition);
            return None;
        };
        if let Request::Append { extent, small, data, .. } = req {
            let Some(d) = g.data_mut() else {
                self.respond(from, rid, Response::NoSuchPartition);
                return None;
            };
            d.append(me, now, timeout, from, rid, extent, small, data, &mut self.out);
            return None;
        }
        if !g.raft.is_leader() {
            let r = Self::not_leader(g);
            self.respond(from, rid, r);
            return None;
        }
        let resp = match req {
            Request::Meta { session, ack_below, op, .. } => {
                let Some(m) = g.meta() else { return self.mismatch(from, rid) };
                if op.is_read() {
                    if !g.readable(now) {
                        Some(Response::Busy("leader not ready for reads".into()))
                    } else {
                        Some(Response::Meta(group::meta_read(m, &op)))
                    }
                } else if let Some(r) = g.precheck(session) {
                    Some(r)
                } else {
                    let cmd = Command { session, ack_below, now, body: CommandBody::Meta(op) };
                    g.propose(now, &cmd, Some((from, rid)));
                    None
                }
            }
            Request::Data { session, ack_below, op, .. } => {
                let Some(d) = g.data() else { return self.mismatch(from, rid) };
                if !d.ready() {
                    Some(Response::Data(Err(DataError::Recovering)))
                } else if let Some(r) = g.precheck(session) {
                    Some(r)
                } else {
                    let check = match &op {
                        DataOp::Overwrite { extent, offset, data } => match d.part.committed(*extent) {
                            None => Err(crate::extent::ExtentError::NotFound),
                            Some(c) if offset + data.len() as u64 > c => Err(crate::extent::ExtentError::OutOfCommittedRange),
                            Some(_) => Ok(()),
                        },
                        DataOp::DeleteContent { .. } => Ok(()),
                    };
                    match check {
                        Err(e) => Some(Response::Data(Err(e.into()))),
                        Ok(()) => {
                            let cmd = Command { session, ack_below, now, body: CommandBody::Data(op) };
                            g.propose(now, &cmd, Some((from, rid)));
                            None
                        }
                    }
                }
            }
            Request::Read { extent, offset, len, .. } => {
                let Some(d) = g.data() else { return self.mismatch(from, rid) };
                if !d.ready() {
                    Some(Response::Data(Err(DataError::Recovering)))
                } else if !g.readable(now) {
                    Some(Response::Busy("leader not ready for reads".into()))
                } else {
                    Some(Response::Data(d.part.read(extent, offset, len).map(DataReply::Bytes).map_err(Into::into)))
                }
            }
            Request::Resolve { session, .. } => {
                let cmd = Command { session: Some(session), ack_below: 0, now, body: CommandBody::Resolve { seq: session.seq } };
                g.propose(now, &cmd, Some((from, rid)));
                None
            }
            Request::Admin { session, op } => {
                let Some(m) = g.mgr() else { return self.mismatch(from, rid) };
                match op {
                    AdminOp::GetView { .. } | AdminOp::VolumeInfo { .. } | AdminOp::ListNodes | AdminOp::ListPartitions { .. } => {
                        if !g.readable(now) {
                            Some(Response::Busy("manager leader not ready".into()))
                        } else {
                            Some(Response::Admin(m.cluster.query(&op)))
                        }
                    }
                    AdminOp::SplitPartition { partition } => {
                        let volume = m.cluster.partitions.get(&partition).map(|p| p.volume.clone());
                        let is_sentinel = volume.as_ref().and_then(|v| m.cluster.sentinel(v)).is_some_and(|s| s.id == partition);
                        match volume {
                            Some(v) if is_sentinel && g.readable(now) => {
                                g.mgr_mut().unwrap().add_split_waiter(partition, from, rid);
                                mgr::start_split(g, now, &v, &mut self.out);
                                None
                            }
                            Some(_) if !is_sentinel => Some(Response::Admin(Err(crate::proto::ManagerError::NotSentinelPartition))),
                            Some(_) => Some(Response::Busy("manager leader not ready".into())),
                            None => Some(Response::Admin(Err(crate::proto::ManagerError::NotFound))),
                        }
                    }
                    op => {
                        if let Some(r) = g.precheck(session) {
                            Some(r)
                        } else {
                            let cmd = Command { session, ack_below: 0, now, body: CommandBody::Manager(ManagerCmd::Admin(op)) };
                            g.propose(now, &cmd, Some((from, rid)));
                            None
                        }
                    }
                }
            }
            Request::Append { .. } | Request::Discover => unreachable!(),
        };
        if let Some(r) = resp {
            self.respond(from, rid, r);
        }
        Some(gid)
    }

    fn mismatch(&mut self, from: Endpoint, rid: u64) -> Option<GroupId> {
        self.respond(from, rid, Response::NoSuchPartition);
        None
    }

    fn addr_of(&self, id: NodeId) -> String {
        if let Some(g) = self.groups.get(&MANAGER_GROUP).and_then(Group::mgr) {
            if let Some(n) = g.cluster.nodes.get(&id) {
                return n.spec.addr.clone();
            }
        }
        self.topology.iter().find(|n| n.id == id).map(|n| n.addr.clone()).unwrap_or_default()
    }

    fn advance(&mut self, now: u64, gid: GroupId) {
        let dir = self.dir.clone();
        let Some(g) = self.groups.get_mut(&gid) else { return };
        let effects = g.advance(now, &mut self.out, self.cfg.snapshot_entries, dir.as_deref());
        for e in effects {
            match e {
                Applied::Split { partition, result } => {
                    if let Some(m) = g.mgr_mut() {
                        let waiters = m.take_split_waiters(partition);
                        mgr::split_reply(waiters, &result, &mut self.out);
                    }
                }
            }
        }
    }

    /// Peers this node heartbeats: its Raft set plus co-members of any group
    /// it hosts.
    pub fn heartbeat_peers(&self) -> BTreeSet<NodeId> {
        let mut peers = self.set_peers.clone();
        for g in self.groups.values() {
            peers.extend(g.raft.peers());
        }
        peers
    }

    pub fn tick(&mut self, now: u64) -> Vec<Envelope> {
        let me = self.spec.id;
        let retry = self.cfg.align_retry_ms;
        let ids: Vec<GroupId> = self.groups.keys().copied().collect();
        for gid in &ids {
            let g = self.groups.get_mut(gid).unwrap();
            g.raft.tick(now);
            let leader_known = g.raft.leader().is_some();
            let caught_up = g.applied == g.raft.commit_index();
            if let Some(d) = g.data_mut() {
                d.tick(me, now, retry, leader_known, caught_up, &mut self.out);
            }
            if *gid == MANAGER_GROUP {
                self.advance(now, *gid);
                let g = self.groups.get_mut(gid).unwrap();
                mgr::duties(g, now, &mut self.out);
            }
            self.advance(now, *gid);
        }
        if now >= self.last_heartbeat + self.cfg.heartbeat_ms {
            self.last_heartbeat = now - now % self.cfg.heartbeat_ms;
            self.send_heartbeats();
        }
        if now >= self.last_report + self.cfg.report_ms {
            self.last_report = now - now % self.cfg.report_ms;
            let report = self.report();
            for m in self.managers.clone() {
                self.send(Endpoint::Node(m), Message::Report(report.clone()));
            }
        }
        std::mem::take(&mut self.out)
    }

    fn send_heartbeats(&mut self) {
        let peers = self.heartbeat_peers();
        let mut leading: BTreeMap<NodeId, Vec<(GroupId, u64, u64)>> = BTreeMap::new();
        let mut following: BTreeMap<NodeId, Vec<(GroupId, u64, u64)>> = BTreeMap::new();
        for (gid, g) in &self.groups {
            if let Some((term, commit)) = g.raft.heartbeat_entry() {
                for p in g.raft.peers() {
                    leading.entry(p).or_default().push((*gid, term, commit));
                }
            }
            if let Some((leader, term, matched)) = g.raft.follower_entry() {
                following.entry(leader).or_default().push((*gid, term, matched));
            }
        }
        for p in peers {
            let msg = Message::Heartbeat {
                leading: leading.remove(&p).unwrap_or_default(),
                following: following.remove(&p).unwrap_or_default(),
            };
            self.send(Endpoint::Node(p), msg);
        }
    }

    pub fn report(&self) -> NodeReport {
        let mut partitions = Vec::new();
        let mut used = 0;
        for (gid, g) in &self.groups {
            if *gid == MANAGER_GROUP {
                continue;
            }
            let base = PartitionReport {
                id: *gid,
                leader: g.raft.leader(),
                is_leader: g.raft.is_leader(),
                status: PartitionStatus::ReadWrite,
                start: 0,
                end: 0,
                max_inode_id: 0,
                items: 0,
                used_bytes: 0,
            };
            let r = match &g.sm {
                Sm::Meta(m) => {
                    let (start, end) = m.range();
                    used += m.item_count() * META_ITEM_BYTES;
                    PartitionReport { status: m.status, start, end, max_inode_id: m.max_inode_id(), items: m.item_count(), ..base }
                }
                Sm::Data(d) => {
                    used += d.part.used_bytes();
                    PartitionReport { status: d.part.status, used_bytes: d.part.used_bytes(), ..base }
                }
                Sm::Manager(_) => continue,
            };
            partitions.push(r);
        }
        NodeReport { node: self.spec.id, used, partitions }
    }

    pub fn hosted(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.groups.keys().copied()
    }

    pub fn meta_partition(&self, pid: GroupId) -> Option<&MetaPartition> {
        self.groups.get(&pid).and_then(Group::meta)
    }

    pub fn data_state(&self, pid: GroupId) -> Option<&DataState> {
        self.groups.get(&pid).and_then(Group::data)
    }

    pub fn data_partition_mut(&mut self, pid: GroupId) -> Option<&mut DataPartition> {
        self.groups.get_mut(&pid).and_then(Group::data_mut).map(|d| &mut d.part)
    }

    pub fn cluster(&self) -> Option<&ClusterState> {
        self.groups.get(&MANAGER_GROUP).and_then(Group::mgr).map(|m| &m.cluster)
    }

    pub fn sessions(&self, gid: GroupId) -> Option<&Sessions> {
        self.groups.get(&gid).map(|g| &g.sessions)
    }

    pub fn is_leader(&self, gid: GroupId) -> bool {
        self.groups.get(&gid).is_some_and(|g| g.raft.is_leader())
    }

    pub fn leader_of(&self, gid: GroupId) -> Option<NodeId> {
        self.groups.get(&gid).and_then(|g| g.raft.leader())
    }

    pub fn term_of(&self, gid: GroupId) -> Option<u64> {
        self.groups.get(&gid).map(|g| g.raft.term())
    }

    pub fn applied_index(&self, gid: GroupId) -> Option<u64> {
        self.groups.get(&gid).map(|g| g.applied)
    }

    /// Committed log entries of a group from its first retained index.
    pub fn committed_entries(&self, gid: GroupId) -> Vec<(u64, u64, u32)> {
        let Some(g) = self.groups.get(&gid) else { return Vec::new() };
        let log = g.raft.log();
        (log.first_index()..=g.raft.commit_index()).filter_map(|i| log.entry(i).map(|e| (e.index, e.term, e.crc))).collect()
    }
}
