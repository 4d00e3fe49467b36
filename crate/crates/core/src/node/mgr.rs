//! Resource-manager replica: leader-side background work on top of the
//! replicated [`ClusterState`].

use std::collections::BTreeMap;

use super::group::Group;
use super::Envelope;
use crate::manager::ClusterState;
use crate::proto::{Command, CommandBody, ManagerCmd, Message, MetaOp, MetaReply, NodeReport, Request, Response};
use crate::meta::MetaError;
use crate::types::{Endpoint, NodeId, PartitionId, PartitionKind, PartitionStatus};

enum Rpc {
    Split { volume: String, partition: PartitionId, end: u64 },
    Root { volume: String },
}

pub struct ManagerState {
    pub cluster: ClusterState,
    leader_since: Option<u64>,
    rpcs: BTreeMap<u64, (u64, Rpc)>,
    split_inflight: BTreeMap<String, u64>,
    root_inflight: BTreeMap<String, u64>,
    last_liveness: u64,
    last_expand: BTreeMap<String, u64>,
    last_create: BTreeMap<(PartitionId, NodeId), u64>,
    last_status: BTreeMap<(PartitionId, NodeId), u64>,
    /// Status each replica last reported, volatile.
    seen_status: BTreeMap<(PartitionId, NodeId), PartitionStatus>,
    /// Admin callers waiting for a split of the given partition.
    split_waiters: BTreeMap<PartitionId, Vec<(Endpoint, u64)>>,
    next_rid: u64,
    /// Leader redirects learned from meta nodes, newer than report hints.
    hints: BTreeMap<PartitionId, NodeId>,
}

const RPC_TIMEOUT_MS: u64 = 2000;
const RESEND_MS: u64 = 1000;

impl ManagerState {
    pub fn new(cluster: ClusterState) -> Self {
        Self {
            cluster,
            leader_since: None,
            rpcs: BTreeMap::new(),
            split_inflight: BTreeMap::new(),
            root_inflight: BTreeMap::new(),
            last_liveness: 0,
            last_expand: BTreeMap::new(),
            last_create: BTreeMap::new(),
            last_status: BTreeMap::new(),
            seen_status: BTreeMap::new(),
            split_waiters: BTreeMap::new(),
            next_rid: 1,
            hints: BTreeMap::new(),
        }
    }

    pub(crate) fn split_applied(&mut self, partition: PartitionId) {
        if let Some(p) = self.cluster.partitions.get(&partition) {
            let v = p.volume.clone();
            self.split_inflight.remove(&v);
        }
    }

    pub(crate) fn add_split_waiter(&mut self, partition: PartitionId, to: Endpoint, rid: u64) {
        self.split_waiters.entry(partition).or_default().push((to, rid));
    }

    pub(crate) fn take_split_waiters(&mut self, partition: PartitionId) -> Vec<(Endpoint, u64)> {
        self.split_waiters.remove(&partition).unwrap_or_default()
    }

    fn rpc(&mut self, now: u64, to: NodeId, req: Request, what: Rpc, out: &mut Vec<Envelope>) {
        let rid = self.next_rid;
        self.next_rid += 1;
        self.rpcs.insert(rid, (now, what));
        out.push(Envelope { to: Endpoint::Node(to), msg: Message::Request { rid, req } });
    }
}

fn cmd(now: u64, c: ManagerCmd) -> Command {
    Command { session: None, ack_below: 0, now, body: CommandBody::Manager(c) }
}

/// Leader starts a split of the volume's sentinel partition.
pub(crate) fn start_split(g: &mut Group, now: u64, volume: &str, out: &mut Vec<Envelope>) -> bool {
    let Some(m) = g.mgr_mut() else { return false };
    let Some(s) = m.cluster.sentinel(volume).cloned() else { return false };
    let reported = m.cluster.reports.get(&s.id).map_or(s.start, |r| r.max_inode_id.max(s.start));
    let end = reported.saturating_add(m.cluster.cfg.split_delta);
    let to = m.hints.get(&s.id).copied().or(s.leader_hint).unwrap_or(s.replicas[0].node);
    m.split_inflight.insert(volume.to_string(), now);
    let req = Request::Meta { partition: s.id, session: None, ack_below: 0, op: MetaOp::ApplySplit { end } };
    m.rpc(now, to, req, Rpc::Split { volume: volume.to_string(), partition: s.id, end }, out);
    true
}

pub(crate) fn on_report(g: &mut Group, now: u64, report: NodeReport) {
    let Some(m) = g.mgr_mut() else { return };
    for p in &report.partitions {
        m.seen_status.insert((p.id, report.node), p.status);
    }
    if g.raft.is_leader() {
        g.propose(now, &cmd(now, ManagerCmd::Report { now, report }), None);
    }
}

pub(crate) fn on_response(g: &mut Group, now: u64, rid: u64, resp: Response) {
    let leader = g.raft.is_leader();
    let Some(m) = g.mgr_mut() else { return };
    let Some((_, what)) = m.rpcs.remove(&rid) else { return };
    match what {
        Rpc::Split { volume, partition, end } => match resp {
            Response::Meta(Ok(_)) if leader => {
                g.propose(now, &cmd(now, ManagerCmd::Split { partition, end }), None);
            }
            Response::Meta(Err(MetaError::AlreadySplit)) => {
                // The meta node already cut its range; its next report
                // carries the end and completes the split.
            }
            Response::NotLeader { hint: Some(h) } => {
                m.hints.insert(partition, h);
                m.split_inflight.remove(&volume);
            }
            _ => {
                m.split_inflight.remove(&volume);
            }
        },
        Rpc::Root { volume } => {
            m.root_inflight.remove(&volume);
            if let (Response::Meta(Ok(MetaReply::Inode(_))), true) = (resp, leader) {
                g.propose(now, &cmd(now, ManagerCmd::RootReady { volume }), None);
            }
        }
    }
}

/// Periodic leader work: liveness, expansion, splits, root creation and
/// pushing partitions and statuses out to nodes.
pub(crate) fn duties(g: &mut Group, now: u64, out: &mut Vec<Envelope>) {
    if !g.raft.is_leader() {
        if let Some(m) = g.mgr_mut() {
            m.leader_since = None;
        }
        return;
    }
    let readable = g.readable(now);
    let Some(m) = g.mgr_mut() else { return };
    let since = *m.leader_since.get_or_insert(now);
    if !readable {
        return;
    }
    m.rpcs.retain(|_, (t, _)| now < *t + RPC_TIMEOUT_MS);
    m.split_inflight.retain(|_, t| now < *t + RPC_TIMEOUT_MS);
    m.root_inflight.retain(|_, t| now < *t + RPC_TIMEOUT_MS);
    let mut proposals = Vec::new();
    let window = m.cluster.cfg.liveness_window_ms;
    if now >= since + window && now >= m.last_liveness + 500 && m.cluster.liveness_changes(now) {
        m.last_liveness = now;
        proposals.push(ManagerCmd::Liveness { now });
    }
    let volumes: Vec<String> = m.cluster.volumes.keys().cloned().collect();
    let mut splits = Vec::new();
    for v in &volumes {
        if m.cluster.needs_expansion(v) && now >= m.last_expand.get(v).copied().unwrap_or(0) + 2000 {
            m.last_expand.insert(v.clone(), now);
            proposals.push(ManagerCmd::Admin(crate::proto::AdminOp::ExpandVolume { volume: v.clone(), count: None }));
        }
        if let Some(s) = m.cluster.sentinel(v) {
            if let Some(r) = m.cluster.reports.get(&s.id) {
                let full = r.items >= m.cluster.cfg.split_items || r.status == PartitionStatus::ReadOnly(crate::types::ReadOnlyReason::Full);
                if full && r.end == crate::types::MAX_INODE_ID && !m.split_inflight.contains_key(v) {
                    splits.push(v.clone());
                }
            }
        }
        let info = &m.cluster.volumes[v];
        if !info.root_ready && !m.root_inflight.contains_key(v) {
            if let Some(first) = info.meta_partitions.iter().min().map(|id| m.cluster.partitions[id].clone()) {
                let attempt = (now / RESEND_MS) as usize;
                let to = first.leader_hint.unwrap_or(first.replicas[attempt % first.replicas.len()].node);
                m.root_inflight.insert(v.clone(), now);
                let req = Request::Meta { partition: first.id, session: None, ack_below: 0, op: MetaOp::CreateRoot };
                m.rpc(now, to, req, Rpc::Root { volume: v.clone() }, out);
            }
        }
    }
    // Make sure every replica hosts its partition, with the right status.
    let mut creates = Vec::new();
    let mut statuses = Vec::new();
    for p in m.cluster.partitions.values() {
        for r in &p.replicas {
            let Some(n) = m.cluster.nodes.get(&r.node) else { continue };
            if !n.alive {
                continue;
            }
            let key = (p.id, r.node);
            if !n.hosted.contains(&p.id) {
                if now >= m.last_create.get(&key).copied().unwrap_or(0) + RESEND_MS || !m.last_create.contains_key(&key) {
                    creates.push((key, p.clone()));
                }
                continue;
            }
            let seen = m.seen_status.get(&key).copied();
            let push = match p.kind {
                PartitionKind::Data => seen.is_some_and(|s| s != p.status),
                PartitionKind::Meta => seen.is_some_and(|s| s.is_writable()) && !p.status.is_writable(),
            };
            if push && now >= m.last_status.get(&key).copied().unwrap_or(0) + RESEND_MS {
                statuses.push((key, p.status));
            }
        }
    }
    for (key, desc) in creates {
        m.last_create.insert(key, now);
        out.push(Envelope { to: Endpoint::Node(key.1), msg: Message::CreatePartition(desc) });
    }
    for (key, status) in statuses {
        m.last_status.insert(key, now);
        out.push(Envelope { to: Endpoint::Node(key.1), msg: Message::SetPartitionStatus { partition: key.0, status } });
    }
    for c in proposals {
        g.propose(now, &cmd(now, c), None);
    }
    for v in splits {
        start_split(g, now, &v, out);
    }
}

pub(crate) fn split_reply(waiters: Vec<(Endpoint, u64)>, result: &Response, out: &mut Vec<Envelope>) {
    for (to, rid) in waiters {
        out.push(Envelope { to, msg: Message::Response { rid, resp: result.clone() } });
    }
}
