//! Scripted cluster scenarios with their checks. Shared by the simulator's
//! own tests and the acceptance suite.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use cfs_core::client::{ClientConfig, FsError, Transport};
use cfs_core::proto::{AdminOp, AdminReply, Message, NodeSpec};
use cfs_core::types::{Endpoint, NodeId, PartitionId, PartitionStatus, MANAGER_GROUP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::census::{self, Accounting, Violation};
use crate::cluster::{self, VolumeSpec};
use crate::sim::{Sim, SimConfig};
use crate::transport::SimTransport;

fn sim_with(topology: &[NodeSpec], seed: u64) -> Sim {
    Sim::new(topology, SimConfig { seed, ..SimConfig::default() })
}

/// Which replica of the active chain to crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashRole {
    Leader,
    Follower,
}

#[derive(Clone, Debug, Default)]
pub struct AppendCrashReport {
    pub crashed: Option<NodeId>,
    pub partition: Option<PartitionId>,
    pub acked: usize,
    pub failed: usize,
    pub reads: usize,
    /// Reads that were not a prefix of the acknowledged content.
    pub bad_reads: Vec<String>,
    /// Files whose final content differs from the acknowledged bytes.
    pub final_diffs: Vec<String>,
    pub violations: Vec<Violation>,
    /// The partition was marked read-only after the crash.
    pub readonly_seen: bool,
    pub finished: bool,
}

impl AppendCrashReport {
    pub fn passed(&self) -> bool {
        self.finished && self.crashed.is_some() && self.bad_reads.is_empty() && self.final_diffs.is_empty() && self.violations.is_empty()
    }
}

const FILES: usize = 4;

/// One writer appends `appends` chunks round-robin to four files while a
/// reader keeps reading them. After `crash_after` chain forwards, one
/// replica of the chain in use crashes; it restarts 2 s later.
pub fn append_crash(seed: u64, role: CrashRole, appends: usize, crash_after: u64) -> AppendCrashReport {
    let mut rep = AppendCrashReport::default();
    let mut sim = sim_with(&cluster::topology(3, 3, 6), seed);
    if let Err(e) = cluster::create_volume(&mut sim, &VolumeSpec::default()) {
        rep.violations.push(Violation { check: "bootstrap", detail: e.to_string() });
        return rep;
    }
    let forwards: Rc<RefCell<Vec<(PartitionId, Endpoint)>>> = Rc::default();
    let f2 = forwards.clone();
    sim.set_observer(Some(Box::new(move |from, _to, m| {
        if let Message::PbForward { partition, .. } = m {
            f2.borrow_mut().push((*partition, from));
        }
        false
    })));

    let acked: Rc<RefCell<Vec<Vec<u8>>>> = Rc::new(RefCell::new(vec![Vec::new(); FILES]));
    let counts: Rc<Cell<(usize, usize)>> = Rc::default();
    let done = Rc::new(Cell::new(false));
    let reads: Rc<RefCell<Vec<(usize, Vec<u8>)>>> = Rc::default();
    let managers = sim.managers();

    let (a2, c2, d2, m2) = (acked.clone(), counts.clone(), done.clone(), managers.clone());
    sim.spawn(move |t: SimTransport| async move {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Ok(mut fs) = cluster::mount(t, m2, "vol", ClientConfig::default()).await else {
            d2.set(true);
            return;
        };
        for i in 0..FILES {
            let _ = fs.create_file(&format!("/f{i}")).await;
        }
        for i in 0..appends {
            let f = i % FILES;
            let data: Vec<u8> = (0..rng.gen_range(1..=64 * 1024)).map(|_| rng.gen()).collect();
            let r: Result<(), FsError> = async {
                let mut h = fs.open(&format!("/f{f}"), true).await?;
                fs.write(&mut h, &data).await?;
                fs.close(h).await
            }
            .await;
            let (ok, bad) = c2.get();
            if r.is_ok() {
                a2.borrow_mut()[f].extend_from_slice(&data);
                c2.set((ok + 1, bad));
            } else {
                c2.set((ok, bad + 1));
            }
        }
        d2.set(true);
    });
    let (r2, d3) = (reads.clone(), done.clone());
    sim.spawn(move |t: SimTransport| async move {
        let Ok(mut fs) = cluster::mount(t.clone(), managers, "vol", ClientConfig::default()).await else { return };
        let mut i = 0;
        while !d3.get() {
            let f = i % FILES;
            i += 1;
            if let Ok(b) = fs.read_file(&format!("/f{f}")).await {
                r2.borrow_mut().push((f, b));
            }
            t.sleep(15).await;
        }
    });

    sim.run_until(600_000, |_| forwards.borrow().len() as u64 >= crash_after || done.get());
    let last = forwards.borrow().last().copied();
    if let Some((pid, _)) = last {
        let replicas = view_replicas(&sim, pid);
        let victim = match role {
            CrashRole::Leader => replicas.first().copied(),
            CrashRole::Follower => replicas.last().copied(),
        };
        if let Some(n) = victim {
            sim.crash(n);
            rep.crashed = Some(n);
            rep.partition = Some(pid);
            sim.run_for(2_000);
            sim.restart(n);
        }
    }
    sim.set_observer(None);
    rep.finished = sim.run_tasks(600_000);
    sim.run_for(2_000);

    let final_content = {
        let managers = sim.managers();
        sim.block_on(120_000, move |t| async move {
            let mut fs = cluster::mount(t, managers, "vol", ClientConfig::default()).await.ok()?;
            let mut out = Vec::new();
            for f in 0..FILES {
                out.push(fs.read_file(&format!("/f{f}")).await.ok()?);
            }
            Some(out)
        })
        .flatten()
    };
    let acked = acked.borrow();
    match final_content {
        Some(fc) => {
            for f in 0..FILES {
                if fc[f] != acked[f] {
                    rep.final_diffs.push(format!("/f{f}: {} bytes, acknowledged {}", fc[f].len(), acked[f].len()));
                }
            }
        }
        None => rep.final_diffs.push("final read failed".into()),
    }
    for (f, b) in reads.borrow().iter() {
        rep.reads += 1;
        if !acked[*f].starts_with(b) {
            rep.bad_reads.push(format!("/f{f}: read {} bytes that are not an acknowledged prefix", b.len()));
        }
    }
    (rep.acked, rep.failed) = counts.get();
    if let Some(pid) = rep.partition {
        rep.readonly_seen = view_status(&sim, pid).is_some_and(|s| !s.is_writable());
    }
    let mut c = census::capture(&sim, "vol");
    rep.violations = c.check(&sim, &Accounting::default());
    rep
}

fn view_replicas(sim: &Sim, pid: PartitionId) -> Vec<NodeId> {
    sim.manager_leader()
        .and_then(|m| sim.node(m).cluster())
        .and_then(|c| c.partitions.get(&pid).map(|p| p.replicas.iter().map(|r| r.node).collect()))
        .unwrap_or_default()
}

fn view_status(sim: &Sim, pid: PartitionId) -> Option<PartitionStatus> {
    sim.manager_leader().and_then(|m| sim.node(m).cluster()).and_then(|c| c.partitions.get(&pid).map(|p| p.status))
}

#[derive(Clone, Debug, Default)]
pub struct FailoverReport {
    pub old_leader: Option<NodeId>,
    pub new_leader: Option<NodeId>,
    /// Virtual ms from the partition to the new leader.
    pub election_ms: u64,
    /// A client fetched the volume view while the old leader was cut off.
    pub view_served: bool,
}

/// Cuts the manager leader off from everyone and checks that another
/// manager takes over and keeps serving volume views.
pub fn manager_failover(seed: u64) -> FailoverReport {
    let mut rep = FailoverReport::default();
    let mut sim = sim_with(&cluster::default_topology(), seed);
    if cluster::create_volume(&mut sim, &VolumeSpec::default()).is_err() {
        return rep;
    }
    let Some(old) = sim.manager_leader() else { return rep };
    rep.old_leader = Some(old);
    sim.isolate(old);
    let t0 = sim.now();
    sim.run_until(30_000, |s| new_leader(s, old).is_some());
    rep.new_leader = new_leader(&sim, old);
    rep.election_ms = sim.now() - t0;
    let managers = sim.managers();
    rep.view_served = sim
        .block_on(30_000, move |t: SimTransport| async move {
            let id = t.client_id();
            let mut c = cfs_core::client::MountedVolume::admin_client(t, managers, ClientConfig::default(), id);
            matches!(c.admin(AdminOp::GetView { volume: "vol".into() }).await, Ok(AdminReply::View(v)) if v.root_ready)
        })
        .unwrap_or(false);
    rep
}

fn new_leader(sim: &Sim, old: NodeId) -> Option<NodeId> {
    sim.nodes().find(|(id, n)| **id != old && sim.is_up(**id) && n.is_leader(MANAGER_GROUP)).map(|(id, _)| *id)
}

/// Heartbeat messages sent in each of `windows` consecutive heartbeat
/// intervals, after `warmup_ms` of settling.
pub fn heartbeats_per_interval(topology: &[NodeSpec], seed: u64, warmup_ms: u64, windows: usize) -> Vec<u64> {
    let mut sim = sim_with(topology, seed);
    let hb = sim.cfg.node.heartbeat_ms;
    // Sample between heartbeat boundaries so each window holds one round.
    let start = (warmup_ms / hb) * hb + hb / 2;
    sim.run_until_time(start);
    let count = |s: &Sim| s.counters.sent.get("heartbeat").copied().unwrap_or(0);
    let mut out = Vec::with_capacity(windows);
    for _ in 0..windows {
        let before = count(&sim);
        sim.run_for(hb);
        out.push(count(&sim) - before);
    }
    out
}

/// Every node in one raft set: the ungrouped baseline.
pub fn ungrouped(topology: &[NodeSpec]) -> Vec<NodeSpec> {
    topology.iter().cloned().map(|mut n| {
        n.raft_set = 0;
        n
    }).collect()
}

/// Number of partitions of each status in a volume, per the manager.
pub fn status_counts(sim: &Sim, volume: &str) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    if let Some(c) = sim.manager_leader().and_then(|m| sim.node(m).cluster()) {
        for p in c.partitions.values().filter(|p| p.volume == volume) {
            *out.entry(p.status.to_string()).or_default() += 1;
        }
    }
    out
}
