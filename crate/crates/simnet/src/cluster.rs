//! Helpers for standing up a simulated cluster with a volume.

use cfs_core::client::{ClientConfig, FsError, MountedVolume};
use cfs_core::proto::{AdminOp, AdminReply, NodeSpec};
use cfs_core::types::{NodeId, NodeKind};

use crate::sim::Sim;
use crate::transport::SimTransport;

/// `managers` manager nodes in raft set 0, then `meta` and `data` nodes,
/// three per raft set.
pub fn topology(managers: u32, meta: u32, data: u32) -> Vec<NodeSpec> {
    let mut out = Vec::new();
    let mut id = 1;
    let mut push = |kind: NodeKind, n: u32, first_set: u32, capacity: u64| {
        for i in 0..n {
            out.push(NodeSpec { id: NodeId(id), kind, addr: format!("sim:{id}"), capacity, raft_set: first_set + i / 3 });
            id += 1;
        }
    };
    push(NodeKind::Manager, managers, 0, 1 << 30);
    push(NodeKind::Meta, meta, 1, 16 << 30);
    push(NodeKind::Data, data, 1 + meta.div_ceil(3), 64 << 30);
    out
}

/// Three managers, three meta nodes and three data nodes.
pub fn default_topology() -> Vec<NodeSpec> {
    topology(3, 3, 3)
}

#[derive(Clone, Debug)]
pub struct VolumeSpec {
    pub name: String,
    pub replicas: usize,
    pub meta: usize,
    pub data: usize,
    pub small_file_threshold: Option<u64>,
}

impl Default for VolumeSpec {
    fn default() -> Self {
        Self { name: "vol".into(), replicas: 3, meta: 3, data: 3, small_file_threshold: None }
    }
}

/// Runs one manager operation from a throwaway admin client.
pub fn admin(sim: &mut Sim, limit_ms: u64, op: AdminOp) -> Result<AdminReply, FsError> {
    let managers = sim.managers();
    sim.block_on(limit_ms, move |t: SimTransport| async move {
        let id = t.client_id();
        let mut c = MountedVolume::admin_client(t, managers, ClientConfig::default(), id);
        c.admin(op).await
    })
    .unwrap_or_else(|| Err(FsError::NotReady("admin operation did not finish".into())))
}

/// Waits for a manager leader, creates the volume and waits for its root.
pub fn create_volume(sim: &mut Sim, v: &VolumeSpec) -> Result<(), FsError> {
    sim.run_until(20_000, |s| s.manager_leader().is_some());
    admin(
        sim,
        30_000,
        AdminOp::CreateVolume {
            name: v.name.clone(),
            replicas: v.replicas,
            meta: v.meta,
            data: v.data,
            small_file_threshold: v.small_file_threshold,
        },
    )?;
    let managers = sim.managers();
    let name = v.name.clone();
    sim.block_on(60_000, move |t: SimTransport| async move {
        let id = t.client_id();
        MountedVolume::mount(t, managers, &name, ClientConfig::default(), id).await.map(|_| ())
    })
    .unwrap_or_else(|| Err(FsError::NotReady(v.name.clone())))
}

/// Mounts inside a running client task, using the task's client id.
pub async fn mount(t: SimTransport, managers: Vec<cfs_core::types::Replica>, volume: &str, cfg: ClientConfig) -> Result<MountedVolume<SimTransport>, FsError> {
    let id = t.client_id();
    MountedVolume::mount(t, managers, volume, cfg, id).await
}
