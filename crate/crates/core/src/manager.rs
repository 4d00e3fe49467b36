//! Resource-manager state machine: nodes, volumes and partition placement.
//! Every mutation arrives through the manager's own replicated log, so
//! [`ClusterState::apply`] must be deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::proto::{
    AdminOp, AdminReply, ManagerCmd, ManagerError, NodeInfo, NodeReport, NodeSpec, PartitionReport, VolumeInfo, VolumeView,
};
use crate::types::{
    InodeId, NodeId, NodeKind, PartitionDescriptor, PartitionId, PartitionKind, PartitionStatus, ReadOnlyReason, Replica,
    DEFAULT_SMALL_FILE_THRESHOLD, MAX_INODE_ID,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerConfig {
    /// Headroom added above the reported maxInodeID when splitting.
    pub split_delta: u64,
    /// Nodes above this utilization never receive new partitions.
    pub util_ceiling: f64,
    /// Expand a volume when fewer than this fraction of its data
    /// partitions are writable.
    pub low_water: f64,
    pub liveness_window_ms: u64,
    /// Width of each initial meta partition's inode range.
    pub meta_range_width: u64,
    /// Bytes charged per hosted partition when ranking nodes, so placement
    /// spreads before usage reports catch up.
    pub data_reserve: u64,
    pub meta_reserve: u64,
    /// Item count at which the sentinel meta partition is split.
    pub split_items: u64,
    pub default_replicas: usize,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            split_delta: 16384,
            util_ceiling: 0.9,
            low_water: 0.2,
            liveness_window_ms: 4 * 500,
            meta_range_width: 1 << 24,
            data_reserve: 128 << 20,
            meta_reserve: 16 << 20,
            split_items: 800_000,
            default_replicas: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub cfg: ManagerConfig,
    pub nodes: BTreeMap<NodeId, NodeInfo>,
    pub volumes: BTreeMap<String, VolumeInfo>,
    pub partitions: BTreeMap<PartitionId, PartitionDescriptor>,
    /// Latest report from each partition's leader.
    pub reports: BTreeMap<PartitionId, PartitionReport>,
    next_partition_id: PartitionId,
}

impl ClusterState {
    pub fn new(cfg: ManagerConfig, nodes: impl IntoIterator<Item = NodeSpec>) -> Self {
        let nodes = nodes
            .into_iter()
            .map(|spec| {
                let id = spec.id;
                (id, NodeInfo { spec, used: 0, last_heartbeat: 0, alive: true, decommissioned: false, hosted: Vec::new() })
            })
            .collect();
        Self {
            cfg,
            nodes,
            volumes: BTreeMap::new(),
            partitions: BTreeMap::new(),
            reports: BTreeMap::new(),
            next_partition_id: 1,
        }
    }

    pub fn managers(&self) -> Vec<Replica> {
        self.nodes
            .values()
            .filter(|n| n.spec.kind == NodeKind::Manager)
            .map(|n| Replica { node: n.spec.id, addr: n.spec.addr.clone() })
            .collect()
    }

    fn hosted_count(&self, node: NodeId) -> u64 {
        self.partitions.values().filter(|p| p.replicas.iter().any(|r| r.node == node)).count() as u64
    }

    /// Placement score as an exact fraction (numerator, capacity).
    fn score(&self, n: &NodeInfo) -> (u128, u128) {
        let reserve = match n.spec.kind {
            NodeKind::Data => self.cfg.data_reserve,
            _ => self.cfg.meta_reserve,
        };
        let num = n.used as u128 + self.hosted_count(n.spec.id) as u128 * reserve as u128;
        (num, n.spec.capacity.max(1) as u128)
    }

    fn eligible(&self, n: &NodeInfo, kind: NodeKind) -> bool {
        n.spec.kind == kind && n.alive && !n.decommissioned && n.utilization() <= self.cfg.util_ceiling
    }

    /// Chooses `rc` distinct nodes of `kind` with the lowest utilization,
    /// preferring a single Raft set. Ties break on node id. The returned
    /// order is the replication order (index 0 leads the chain).
    pub fn place(&self, kind: NodeKind, rc: usize) -> Result<Vec<NodeId>, ManagerError> {
        let mut ranked: Vec<((u128, u128), NodeId, u32)> = self
            .nodes
            .values()
            .filter(|n| self.eligible(n, kind))
            .map(|n| (self.score(n), n.spec.id, n.spec.raft_set))
            .collect();
        let cmp = |a: &((u128, u128), NodeId, u32), b: &((u128, u128), NodeId, u32)| {
            let ((an, ad), ai, _) = *a;
            let ((bn, bd), bi, _) = *b;
            (an * bd).cmp(&(bn * ad)).then(ai.cmp(&bi))
        };
        ranked.sort_by(cmp);
        if ranked.len() < rc {
            return Err(ManagerError::InsufficientNodes { needed: rc, available: ranked.len() });
        }
        let mut by_set: BTreeMap<u32, Vec<((u128, u128), NodeId, u32)>> = BTreeMap::new();
        for r in &ranked {
            by_set.entry(r.2).or_default().push(*r);
        }
        let mut best: Option<Vec<((u128, u128), NodeId, u32)>> = None;
        for members in by_set.values() {
            if members.len() < rc {
                continue;
            }
            let cand = members[..rc].to_vec();
            let better = match &best {
                None => true,
                Some(b) => {
                    let mut ord = std::cmp::Ordering::Equal;
                    for (x, y) in cand.iter().zip(b) {
                        ord = cmp(x, y);
                        if ord != std::cmp::Ordering::Equal {
                            break;
                        }
                    }
                    ord == std::cmp::Ordering::Less
                }
            };
            if better {
                best = Some(cand);
            }
        }
        let chosen = best.unwrap_or_else(|| ranked[..rc].to_vec());
        Ok(chosen.into_iter().map(|r| r.1).collect())
    }

    fn replicas(&self, nodes: &[NodeId]) -> Vec<Replica> {
        nodes.iter().map(|id| Replica { node: *id, addr: self.nodes[id].spec.addr.clone() }).collect()
    }

    fn new_partition(
        &mut self,
        volume: &str,
        kind: PartitionKind,
        rc: usize,
        start: InodeId,
        end: InodeId,
    ) -> Result<PartitionId, ManagerError> {
        let node_kind = match kind {
            PartitionKind::Meta => NodeKind::Meta,
            PartitionKind::Data => NodeKind::Data,
        };
        let nodes = self.place(node_kind, rc)?;
        let id = self.next_partition_id;
        self.next_partition_id += 1;
        let (start, end) = if kind == PartitionKind::Meta { (start, end) } else { (0, 0) };
        let desc = PartitionDescriptor {
            id,
            kind,
            volume: volume.to_string(),
            replicas: self.replicas(&nodes),
            status: PartitionStatus::ReadWrite,
            start,
            end,
            leader_hint: None,
        };
        self.partitions.insert(id, desc);
        let v = self.volumes.get_mut(volume).expect("volume exists");
        match kind {
            PartitionKind::Meta => v.meta_partitions.push(id),
            PartitionKind::Data => v.data_partitions.push(id),
        }
        Ok(id)
    }

    pub fn apply(&mut self, now: u64, cmd: &ManagerCmd) -> Result<AdminReply, ManagerError> {
        match cmd {
            ManagerCmd::Admin(op) => self.apply_admin(now, op),
            ManagerCmd::Report { now, report } => {
                self.apply_report(*now, report);
                Ok(AdminReply::Done)
            }
            ManagerCmd::Liveness { now } => {
                self.apply_liveness(*now);
                Ok(AdminReply::Done)
            }
            ManagerCmd::Split { partition, end } => self.split(*partition, *end),
            ManagerCmd::SetStatus { partition, status } => {
                let p = self.partitions.get_mut(partition).ok_or(ManagerError::NotFound)?;
                if p.status != PartitionStatus::Unavailable {
                    p.status = *status;
                }
                Ok(AdminReply::Done)
            }
            ManagerCmd::RootReady { volume } => {
                let v = self.volumes.get_mut(volume).ok_or(ManagerError::NotFound)?;
                v.root_ready = true;
                Ok(AdminReply::Done)
            }
        }
    }

    fn apply_admin(&mut self, now: u64, op: &AdminOp) -> Result<AdminReply, ManagerError> {
        match op {
            AdminOp::CreateVolume { name, replicas, meta, data, small_file_threshold } => {
                if self.volumes.contains_key(name) {
                    return Err(ManagerError::VolumeExists);
                }
                if name.is_empty() || *meta == 0 || *data == 0 || *replicas == 0 {
                    return Err(ManagerError::Invalid("volume needs a name and at least one partition of each kind".into()));
                }
                let mut next = self.clone();
                next.volumes.insert(
                    name.clone(),
                    VolumeInfo {
                        name: name.clone(),
                        replicas: *replicas,
                        meta_partitions: Vec::new(),
                        data_partitions: Vec::new(),
                        small_file_threshold: small_file_threshold.unwrap_or(DEFAULT_SMALL_FILE_THRESHOLD),
                        root_ready: false,
                        expand_step: *data,
                    },
                );
                let w = self.cfg.meta_range_width;
                let mut created = Vec::new();
                for i in 0..*meta as u64 {
                    let start = 1 + i * w;
                    let end = if i + 1 == *meta as u64 { MAX_INODE_ID } else { (i + 1) * w };
                    created.push(next.new_partition(name, PartitionKind::Meta, *replicas, start, end)?);
                }
                for _ in 0..*data {
                    created.push(next.new_partition(name, PartitionKind::Data, *replicas, 0, 0)?);
                }
                *self = next;
                Ok(AdminReply::Created(created))
            }
            AdminOp::ExpandVolume { volume, count } => self.expand(volume, *count),
            AdminOp::AddNode(spec) => {
                if self.nodes.contains_key(&spec.id) {
                    return Err(ManagerError::NodeExists);
                }
                self.nodes.insert(
                    spec.id,
                    NodeInfo { spec: spec.clone(), used: 0, last_heartbeat: now, alive: true, decommissioned: false, hosted: Vec::new() },
                );
                Ok(AdminReply::Done)
            }
            AdminOp::Decommission { node } => {
                let n = self.nodes.get_mut(node).ok_or(ManagerError::UnknownNode)?;
                n.decommissioned = true;
                self.lose_node(*node);
                Ok(AdminReply::Done)
            }
            AdminOp::MarkReadOnly { partition } => {
                let p = self.partitions.get_mut(partition).ok_or(ManagerError::NotFound)?;
                p.status = PartitionStatus::ReadOnly(ReadOnlyReason::Admin);
                Ok(AdminReply::Done)
            }
            other => self.query(other),
        }
    }

    /// Read-only admin requests, served by the leader without logging.
    pub fn query(&self, op: &AdminOp) -> Result<AdminReply, ManagerError> {
        match op {
            AdminOp::GetView { volume } => self.view(volume).map(AdminReply::View),
            AdminOp::VolumeInfo { volume } => {
                let v = self.volumes.get(volume).ok_or(ManagerError::NotFound)?;
                let parts = v.meta_partitions.iter().chain(&v.data_partitions).map(|id| self.partitions[id].clone()).collect();
                Ok(AdminReply::Volume(v.clone(), parts))
            }
            AdminOp::ListNodes => Ok(AdminReply::Nodes(self.nodes.values().cloned().collect())),
            AdminOp::ListPartitions { volume } => Ok(AdminReply::Partitions(
                self.partitions.values().filter(|p| volume.as_ref().is_none_or(|v| &p.volume == v)).cloned().collect(),
            )),
            _ => Err(ManagerError::Invalid("not a query".into())),
        }
    }

    pub fn view(&self, volume: &str) -> Result<VolumeView, ManagerError> {
        let v = self.volumes.get(volume).ok_or(ManagerError::NotFound)?;
        Ok(VolumeView {
            name: v.name.clone(),
            meta: v.meta_partitions.iter().map(|id| self.partitions[id].clone()).collect(),
            data: v.data_partitions.iter().map(|id| self.partitions[id].clone()).collect(),
            small_file_threshold: v.small_file_threshold,
            root_ready: v.root_ready,
        })
    }

    fn expand(&mut self, volume: &str, count: Option<usize>) -> Result<AdminReply, ManagerError> {
        let v = self.volumes.get(volume).ok_or(ManagerError::NotFound)?;
        let n = count.unwrap_or(v.expand_step).max(1);
        let rc = v.replicas;
        let mut next = self.clone();
        let mut created = Vec::new();
        for _ in 0..n {
            created.push(next.new_partition(volume, PartitionKind::Data, rc, 0, 0)?);
        }
        *self = next;
        Ok(AdminReply::Created(created))
    }

    /// Whether fewer than the low-water fraction of data partitions accept
    /// writes.
    pub fn needs_expansion(&self, volume: &str) -> bool {
        let Some(v) = self.volumes.get(volume) else { return false };
        if v.data_partitions.is_empty() {
            return true;
        }
        let writable = v.data_partitions.iter().filter(|id| self.partitions[*id].status.is_writable()).count();
        (writable as f64) < self.cfg.low_water * v.data_partitions.len() as f64
    }

    /// The volume's split candidate: its highest-numbered meta partition,
    /// which owns the range ending at the sentinel.
    pub fn sentinel(&self, volume: &str) -> Option<&PartitionDescriptor> {
        let v = self.volumes.get(volume)?;
        v.meta_partitions.iter().max().map(|id| &self.partitions[id])
    }

    /// Creates the partition that takes over `[end + 1, MAX]` once the meta
    /// node has cut the sentinel down to `end`. Repeating it is a no-op.
    fn split(&mut self, pid: PartitionId, end: InodeId) -> Result<AdminReply, ManagerError> {
        let p = self.partitions.get(&pid).ok_or(ManagerError::NotFound)?.clone();
        if p.kind != PartitionKind::Meta || p.end != MAX_INODE_ID || end < p.start || end == MAX_INODE_ID {
            return Err(ManagerError::NotSentinelPartition);
        }
        let max_id = self.volumes[&p.volume].meta_partitions.iter().max().copied();
        if max_id != Some(pid) {
            return Err(ManagerError::NotSentinelPartition);
        }
        let rc = self.volumes[&p.volume].replicas;
        let mut next = self.clone();
        next.partitions.get_mut(&pid).unwrap().end = end;
        let new_id = next.new_partition(&p.volume, PartitionKind::Meta, rc, end + 1, MAX_INODE_ID)?;
        *self = next;
        Ok(AdminReply::Split { old: self.partitions[&pid].clone(), new: self.partitions[&new_id].clone() })
    }

    fn apply_report(&mut self, now: u64, r: &NodeReport) {
        let Some(n) = self.nodes.get_mut(&r.node) else { return };
        n.used = r.used.min(n.spec.capacity);
        n.last_heartbeat = now;
        n.alive = true;
        n.hosted = r.partitions.iter().map(|p| p.id).collect();
        for pr in &r.partitions {
            let Some(desc) = self.partitions.get_mut(&pr.id) else { continue };
            // Any replica may be the one whose chain timed out.
            if desc.status == PartitionStatus::ReadWrite && matches!(pr.status, PartitionStatus::ReadOnly(_)) {
                desc.status = pr.status;
            }
            if !pr.is_leader {
                continue;
            }
            desc.leader_hint = Some(r.node);
            let reconcile_split = desc.kind == PartitionKind::Meta && desc.end == MAX_INODE_ID && pr.end != MAX_INODE_ID;
            self.reports.insert(pr.id, pr.clone());
            if reconcile_split {
                // The meta node already applied a split whose manager-side
                // half was lost; finish it.
                let _ = self.split(pr.id, pr.end);
            }
        }
    }

    /// Nodes that would change liveness at `now`.
    pub fn liveness_changes(&self, now: u64) -> bool {
        self.nodes.values().any(|n| n.alive && now > n.last_heartbeat + self.cfg.liveness_window_ms)
    }

    fn apply_liveness(&mut self, now: u64) {
        let window = self.cfg.liveness_window_ms;
        let dead: Vec<NodeId> =
            self.nodes.values().filter(|n| n.alive && now > n.last_heartbeat + window).map(|n| n.spec.id).collect();
        for id in dead {
            self.nodes.get_mut(&id).unwrap().alive = false;
            self.lose_node(id);
        }
    }

    /// Primary-backup needs every replica, so data partitions with a replica
    /// on a lost node stop taking writes. Meta partitions keep a quorum.
    fn lose_node(&mut self, id: NodeId) {
        for p in self.partitions.values_mut() {
            if p.kind == PartitionKind::Data && p.status == PartitionStatus::ReadWrite && p.replicas.iter().any(|r| r.node == id) {
                p.status = PartitionStatus::ReadOnly(ReadOnlyReason::ReplicaLost);
            }
        }
    }

    /// Checks the structural invariants: disjoint meta ranges covering the
    /// id space with one sentinel per volume, replicas on distinct nodes.
    pub fn check_invariants(&self) -> Result<(), String> {
        for v in self.volumes.values() {
            let mut ranges: Vec<(InodeId, InodeId)> =
                v.meta_partitions.iter().map(|id| (self.partitions[id].start, self.partitions[id].end)).collect();
            ranges.sort();
            let mut expect = 1;
            for (s, e) in &ranges {
                if *s != expect || e < s {
                    return Err(format!("volume {}: meta ranges {:?} do not tile [1, MAX]", v.name, ranges));
                }
                expect = e.wrapping_add(1);
            }
            if ranges.last().map(|r| r.1) != Some(MAX_INODE_ID) {
                return Err(format!("volume {}: no sentinel partition", v.name));
            }
        }
        for p in self.partitions.values() {
            let mut ids = p.nodes();
            ids.sort();
            ids.dedup();
            if ids.len() != p.replicas.len() {
                return Err(format!("partition {} has duplicate replicas", p.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(id: u32, kind: NodeKind, cap: u64, set: u32) -> NodeSpec {
        NodeSpec { id: NodeId(id), kind, addr: format!("127.0.0.1:{}", 9000 + id), capacity: cap, raft_set: set }
    }

    fn state(nodes: Vec<NodeSpec>) -> ClusterState {
        let cfg = ManagerConfig { data_reserve: 0, meta_reserve: 0, ..Default::default() };
        ClusterState::new(cfg, nodes)
    }

    #[test]
    fn lowest_three_by_utilization() {
        let mut s = state((1..=4).map(|i| spec(i, NodeKind::Data, 1000, 0)).collect());
        for (id, used) in [(1, 100), (2, 200), (3, 300), (4, 900)] {
            s.nodes.get_mut(&NodeId(id)).unwrap().used = used;
        }
        assert_eq!(s.place(NodeKind::Data, 3).unwrap(), vec![NodeId(1), NodeId(2), NodeId(3)]);
        // order follows utilization, not id
        s.nodes.get_mut(&NodeId(1)).unwrap().used = 250;
        assert_eq!(s.place(NodeKind::Data, 3).unwrap(), vec![NodeId(2), NodeId(1), NodeId(3)]);
    }

    #[test]
    fn ties_break_on_node_id() {
        let s = state([5, 3, 9, 1].iter().map(|&i| spec(i, NodeKind::Data, 1000, 0)).collect());
        assert_eq!(s.place(NodeKind::Data, 3).unwrap(), vec![NodeId(1), NodeId(3), NodeId(5)]);
    }

    #[test]
    fn dead_and_overfull_nodes_are_skipped() {
        let mut s = state((1..=5).map(|i| spec(i, NodeKind::Data, 1000, 0)).collect());
        s.nodes.get_mut(&NodeId(1)).unwrap().alive = false;
        s.nodes.get_mut(&NodeId(2)).unwrap().used = 950;
        assert_eq!(s.place(NodeKind::Data, 3).unwrap(), vec![NodeId(3), NodeId(4), NodeId(5)]);
        assert_eq!(s.place(NodeKind::Data, 4), Err(ManagerError::InsufficientNodes { needed: 4, available: 3 }));
    }

    #[test]
    fn prefers_one_raft_set() {
        let mut s = state(vec![
            spec(1, NodeKind::Data, 1000, 1),
            spec(2, NodeKind::Data, 1000, 2),
            spec(3, NodeKind::Data, 1000, 2),
            spec(4, NodeKind::Data, 1000, 2),
            spec(5, NodeKind::Data, 1000, 1),
            spec(6, NodeKind::Data, 1000, 1),
        ]);
        s.nodes.get_mut(&NodeId(1)).unwrap().used = 10;
        let p = s.place(NodeKind::Data, 3).unwrap();
        let sets: Vec<u32> = p.iter().map(|id| s.nodes[id].spec.raft_set).collect();
        assert!(sets.iter().all(|&x| x == sets[0]), "{p:?}");
        assert_eq!(p, vec![NodeId(2), NodeId(3), NodeId(4)]);
    }

    #[test]
    fn sequential_allocations_stay_balanced() {
        // Counted independently of the placement code: after each
        // allocation tally replicas per node.
        let cfg = ManagerConfig { data_reserve: 1 << 20, ..Default::default() };
        let mut s = ClusterState::new(cfg, (1..=10).map(|i| spec(i, NodeKind::Data, 1 << 40, 0)).chain([spec(11, NodeKind::Meta, 1 << 40, 0)]));
        s.apply(0, &ManagerCmd::Admin(AdminOp::CreateVolume { name: "v".into(), replicas: 1, meta: 1, data: 1, small_file_threshold: None }))
            .unwrap();
        for _ in 0..99 {
            s.apply(0, &ManagerCmd::Admin(AdminOp::ExpandVolume { volume: "v".into(), count: Some(1) })).unwrap();
        }
        let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
        for p in s.partitions.values().filter(|p| p.kind == PartitionKind::Data) {
            for r in &p.replicas {
                *counts.entry(r.node).or_default() += 1;
            }
        }
        assert_eq!(counts.values().sum::<usize>(), 100);
        let (lo, hi) = (counts.values().min().unwrap(), counts.values().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        // with replica count 3 as well
        let mut s3 = ClusterState::new(s.cfg.clone(), (1..=10).map(|i| spec(i, NodeKind::Data, 1 << 40, 0)).chain([spec(11, NodeKind::Meta, 1 << 40, 0)]));
        s3.apply(0, &ManagerCmd::Admin(AdminOp::CreateVolume { name: "v".into(), replicas: 1, meta: 1, data: 1, small_file_threshold: None }))
            .unwrap();
        s3.volumes.get_mut("v").unwrap().replicas = 3;
        for _ in 0..100 {
            s3.apply(0, &ManagerCmd::Admin(AdminOp::ExpandVolume { volume: "v".into(), count: Some(1) })).unwrap();
        }
        let mut c3: BTreeMap<NodeId, usize> = BTreeMap::new();
        for p in s3.partitions.values().filter(|p| p.kind == PartitionKind::Data) {
            for r in &p.replicas {
                *c3.entry(r.node).or_default() += 1;
            }
        }
        assert!(c3.values().max().unwrap() - c3.values().min().unwrap() <= 1, "{c3:?}");
    }

    fn cluster() -> ClusterState {
        let mut nodes: Vec<NodeSpec> = (1..=3).map(|i| spec(i, NodeKind::Meta, 1 << 30, 0)).collect();
        nodes.extend((4..=6).map(|i| spec(i, NodeKind::Data, 1 << 40, 1)));
        let mut s = ClusterState::new(ManagerConfig::default(), nodes);
        s.apply(0, &ManagerCmd::Admin(AdminOp::CreateVolume { name: "v".into(), replicas: 3, meta: 2, data: 3, small_file_threshold: None }))
            .unwrap();
        s
    }

    #[test]
    fn volume_ranges_tile_id_space() {
        let s = cluster();
        let v = s.view("v").unwrap();
        assert_eq!((v.meta[0].start, v.meta[0].end), (1, 1 << 24));
        assert_eq!((v.meta[1].start, v.meta[1].end), ((1 << 24) + 1, MAX_INODE_ID));
        assert_eq!(v.data.len(), 3);
        s.check_invariants().unwrap();
        let mut s2 = s.clone();
        assert_eq!(
            s2.apply(0, &ManagerCmd::Admin(AdminOp::CreateVolume { name: "v".into(), replicas: 3, meta: 1, data: 1, small_file_threshold: None })),
            Err(ManagerError::VolumeExists)
        );
    }

    #[test]
    fn split_follows_the_algorithm() {
        let mut nodes: Vec<NodeSpec> = (1..=3).map(|i| spec(i, NodeKind::Meta, 1 << 30, 0)).collect();
        nodes.extend((4..=6).map(|i| spec(i, NodeKind::Data, 1 << 40, 1)));
        let mut s = ClusterState::new(ManagerConfig::default(), nodes);
        s.apply(0, &ManagerCmd::Admin(AdminOp::CreateVolume { name: "v".into(), replicas: 3, meta: 1, data: 1, small_file_threshold: None }))
            .unwrap();
        let pid = s.sentinel("v").unwrap().id;
        // maxInodeID 1000 reported, delta 16384
        let end = 1000 + s.cfg.split_delta;
        let r = s.apply(0, &ManagerCmd::Split { partition: pid, end }).unwrap();
        let AdminReply::Split { old, new } = r else { panic!() };
        assert_eq!((old.start, old.end), (1, 17384));
        assert_eq!((new.start, new.end), (17385, MAX_INODE_ID));
        s.check_invariants().unwrap();
        // the old partition is no longer the sentinel: a repeat is a no-op
        let before = s.clone();
        assert_eq!(s.apply(0, &ManagerCmd::Split { partition: pid, end: 20000 }), Err(ManagerError::NotSentinelPartition));
        assert_eq!(s, before);
    }

    #[test]
    fn expansion_never_moves_existing_partitions() {
        let mut s = cluster();
        let before: BTreeMap<_, _> = s.partitions.iter().map(|(id, p)| (*id, p.nodes())).collect();
        for i in 7..=10 {
            s.apply(0, &ManagerCmd::Admin(AdminOp::AddNode(spec(i, NodeKind::Data, 1 << 40, 2)))).unwrap();
        }
        s.apply(0, &ManagerCmd::Admin(AdminOp::ExpandVolume { volume: "v".into(), count: Some(4) })).unwrap();
        for (id, nodes) in &before {
            assert_eq!(&s.partitions[id].nodes(), nodes);
        }
        // new partitions land on the empty nodes
        let newest = s.partitions.values().last().unwrap();
        assert!(newest.nodes().iter().all(|n| n.0 >= 7));
    }

    #[test]
    fn liveness_marks_data_partitions_read_only() {
        let mut s = cluster();
        for id in [1, 2, 3, 5, 6] {
            s.apply(0, &ManagerCmd::Report { now: 3000, report: NodeReport { node: NodeId(id), used: 0, partitions: vec![] } }).unwrap();
        }
        assert!(s.liveness_changes(3000));
        s.apply(0, &ManagerCmd::Liveness { now: 3000 }).unwrap();
        assert!(!s.nodes[&NodeId(4)].alive);
        let v = s.view("v").unwrap();
        assert!(v.data.iter().all(|p| p.status == PartitionStatus::ReadOnly(ReadOnlyReason::ReplicaLost)));
        assert!(v.meta.iter().all(|p| p.status == PartitionStatus::ReadWrite));
        assert!(s.needs_expansion("v"));
        assert_eq!(
            s.apply(0, &ManagerCmd::Admin(AdminOp::ExpandVolume { volume: "v".into(), count: None })),
            Err(ManagerError::InsufficientNodes { needed: 3, available: 2 })
        );
    }

    #[test]
    fn replaying_the_log_reproduces_state() {
        let mut a = cluster();
        let cmds = vec![
            ManagerCmd::Admin(AdminOp::AddNode(spec(7, NodeKind::Data, 1 << 40, 1))),
            ManagerCmd::Report { now: 10, report: NodeReport { node: NodeId(4), used: 77, partitions: vec![] } },
            ManagerCmd::Admin(AdminOp::ExpandVolume { volume: "v".into(), count: Some(2) }),
            ManagerCmd::Admin(AdminOp::MarkReadOnly { partition: 3 }),
        ];
        for c in &cmds {
            let _ = a.apply(5, c);
        }
        let mut b = cluster();
        for c in &cmds {
            let _ = b.apply(5, c);
        }
        assert_eq!(a, b);
    }
}
