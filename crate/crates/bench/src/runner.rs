//! Runs a workload against a simulated or TCP cluster and gathers the
//! result, including the post-run correctness census.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::str::FromStr;
use std::sync::{Arc, Barrier, Mutex};
use std::time::Instant;

use cfs_core::client::{ClientConfig, FsError, MountedVolume, Transport};
use cfs_core::net::TcpTransport;
use cfs_core::proto::NodeSpec;
use cfs_core::types::{InodeId, InodeType, NodeId, Replica, ROOT_INODE};
use cfs_simnet::census::{self, Accounting};
use cfs_simnet::cluster::{self, VolumeSpec};
use cfs_simnet::{Sim, SimConfig, SimTransport};
use futures::executor::block_on;
use serde::Serialize;
use thiserror::Error;

use crate::workload::{measure, setup, SpecError, WorkerOut, WorkloadSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error(transparent)]
    SpecInvalid(#[from] SpecError),
}

/// A simulated cluster built from scratch for one run.
#[derive(Clone, Debug)]
pub struct SimTarget {
    pub topology: Vec<NodeSpec>,
    pub volume: VolumeSpec,
    pub sim: SimConfig,
    /// Virtual time budget for the whole run.
    pub limit_ms: u64,
}

impl Default for SimTarget {
    /// Three managers, three meta and three data nodes; four meta
    /// partitions.
    fn default() -> Self {
        Self {
            topology: cluster::default_topology(),
            volume: VolumeSpec { meta: 4, ..VolumeSpec::default() },
            sim: SimConfig::default(),
            limit_ms: 24 * 3_600_000,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Target {
    Sim(SimTarget),
    /// Manager addresses of a running deployment and the volume to use.
    Tcp { managers: Vec<Replica>, volume: String },
}

impl FromStr for Target {
    type Err = String;

    /// `sim`, or `tcp:` followed by comma-separated manager addresses,
    /// each optionally prefixed with its node id as `id@host:port`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "sim" {
            return Ok(Target::Sim(SimTarget::default()));
        }
        let list = s.strip_prefix("tcp:").ok_or_else(|| format!("target must be sim or tcp:<addr>, got {s:?}"))?;
        let mut managers = Vec::new();
        for (i, part) in list.split(',').filter(|p| !p.is_empty()).enumerate() {
            let (node, addr) = match part.split_once('@') {
                Some((id, addr)) => (NodeId(id.parse().map_err(|_| format!("bad node id in {part:?}"))?), addr),
                // Unknown ids only cost leader-hint lookups.
                None => (NodeId(u32::MAX - i as u32), part),
            };
            managers.push(Replica { node, addr: addr.to_string() });
        }
        if managers.is_empty() {
            return Err("tcp target needs at least one manager address".into());
        }
        Ok(Target::Tcp { managers, volume: "vol".into() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Passed,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub spec: WorkloadSpec,
    pub target: String,
    /// `virtual` on the simulator, `wall` over TCP.
    pub clock: &'static str,
    pub attempted: u64,
    pub ok: u64,
    pub errors: BTreeMap<String, u64>,
    pub elapsed_us: u64,
    pub iops: f64,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    /// Content or listing checks that failed.
    pub mismatches: Vec<String>,
    pub violations: Vec<String>,
    /// What the census covered.
    pub census: String,
    pub verdict: Verdict,
}

impl BenchResult {
    pub fn error_count(&self) -> u64 {
        self.errors.values().sum()
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn aggregate(spec: &WorkloadSpec, target: String, clock: &'static str, outs: &[WorkerOut], violations: Vec<String>, census: String) -> BenchResult {
    let mut lat: Vec<u64> = outs.iter().flat_map(|o| o.latencies_us.iter().copied()).collect();
    lat.sort_unstable();
    let mut errors = BTreeMap::new();
    for o in outs {
        for (k, n) in &o.errors {
            *errors.entry(k.clone()).or_default() += n;
        }
    }
    let start = outs.iter().map(|o| o.start_us).min().unwrap_or(0);
    let end = outs.iter().map(|o| o.end_us).max().unwrap_or(0);
    let elapsed_us = end.saturating_sub(start).max(1);
    let ok = lat.len() as u64;
    let mismatches: Vec<String> = outs.iter().flat_map(|o| o.mismatches.iter().cloned()).collect();
    let failed = !violations.is_empty() || !mismatches.is_empty() || outs.len() < spec.workers();
    BenchResult {
        spec: spec.clone(),
        target,
        clock,
        attempted: spec.ops,
        ok,
        errors,
        elapsed_us,
        iops: ok as f64 * 1e6 / elapsed_us as f64,
        mean_us: if lat.is_empty() { 0.0 } else { lat.iter().sum::<u64>() as f64 / lat.len() as f64 },
        p50_us: percentile(&lat, 50.0),
        p95_us: percentile(&lat, 95.0),
        p99_us: percentile(&lat, 99.0),
        mismatches,
        violations,
        census,
        verdict: if failed { Verdict::Failed } else { Verdict::Passed },
    }
}

pub fn run_workload(spec: &WorkloadSpec, target: &Target) -> Result<BenchResult, BenchError> {
    spec.validate()?;
    match target {
        Target::Sim(t) => run_sim(spec, t),
        Target::Tcp { managers, volume } => run_tcp(spec, managers, volume),
    }
}

/// Every worker is a separate client task with its own mount. Workers
/// finish setup, wait for each other, then run their measured ops.
pub fn run_sim(spec: &WorkloadSpec, target: &SimTarget) -> Result<BenchResult, BenchError> {
    spec.validate()?;
    let mut cfg = target.sim.clone();
    cfg.seed = spec.seed;
    let mut sim = Sim::new(&target.topology, cfg);
    cluster::create_volume(&mut sim, &target.volume).map_err(|e| BenchError::TargetUnreachable(e.to_string()))?;
    let (outs, _) = sim_workers(&mut sim, spec, &target.volume.name, target.limit_ms);
    // Let in-flight replication settle before the census.
    sim.run_for(1_000);
    let mut acct = Accounting::default();
    for o in &outs {
        acct.add(&o.orphans, &o.unsettled);
    }
    let mut c = census::capture(&sim, &target.volume.name);
    let violations = c.check(&sim, &acct).iter().map(|v| v.to_string()).collect();
    let (live, released, free, dentries) = c.counts();
    let note = format!("cluster census: {live} live inodes, {released} released, {free} free, {dentries} dentries");
    Ok(aggregate(spec, "sim".into(), "virtual", &outs, violations, note))
}

/// Spawns the workers on `sim` and runs until they finish. Returns their
/// outputs and whether all finished within `limit_ms`.
pub fn sim_workers(sim: &mut Sim, spec: &WorkloadSpec, volume: &str, limit_ms: u64) -> (Vec<WorkerOut>, bool) {
    let n = spec.workers();
    let ready = Rc::new(Cell::new(0usize));
    let outs: Rc<RefCell<Vec<WorkerOut>>> = Rc::default();
    let managers = sim.managers();
    for w in 0..n {
        let (ready, outs, managers, spec, volume) = (ready.clone(), outs.clone(), managers.clone(), spec.clone(), volume.to_string());
        sim.spawn(move |t: SimTransport| async move {
            let mut out = WorkerOut { worker: w, ..WorkerOut::default() };
            let prepared = match cluster::mount(t.clone(), managers, &volume, ClientConfig::default()).await {
                Ok(mut fs) => {
                    let p = setup(&mut fs, &spec, w).await;
                    Some((fs, p))
                }
                Err(e) => {
                    out.mismatches.push(format!("worker {w}: mount failed: {e}"));
                    None
                }
            };
            ready.set(ready.get() + 1);
            while ready.get() < n {
                t.sleep(1).await;
            }
            match prepared {
                Some((mut fs, Ok(p))) => {
                    let clock = || t.now_ms() * 1000;
                    measure(&mut fs, &spec, w, p, clock, &mut out).await;
                }
                Some((_, Err(e))) => out.mismatches.push(format!("worker {w}: setup failed: {e}")),
                None => {}
            }
            outs.borrow_mut().push(out);
        });
    }
    let finished = sim.run_tasks(limit_ms);
    let mut v = outs.take();
    v.sort_by_key(|o| o.worker);
    (v, finished)
}

/// Real threads, one per worker, each with its own connections. The
/// census walks the namespace through a fresh client since server state
/// is not reachable from here.
pub fn run_tcp(spec: &WorkloadSpec, managers: &[Replica], volume: &str) -> Result<BenchResult, BenchError> {
    spec.validate()?;
    let n = spec.workers();
    let base: u64 = rand::random::<u64>() & !0xffff;
    // A live volume keeps earlier runs' files, so each run works under a
    // fresh directory.
    let mut spec = spec.clone();
    if spec.root.is_empty() {
        spec.root = format!("/bench-{:012x}", base >> 16);
    }
    let spec = &spec;
    let probe_id = rand::random();
    block_on(async {
        let mut fs = MountedVolume::mount(TcpTransport::new(), managers.to_vec(), volume, ClientConfig::default(), probe_id).await?;
        fs.mkdir(&spec.root).await
    })
    .map_err(|e| BenchError::TargetUnreachable(e.to_string()))?;
    let barrier = Arc::new(Barrier::new(n));
    let outs = Arc::new(Mutex::new(Vec::new()));
    let handles: Vec<_> = (0..n)
        .map(|w| {
            let (barrier, outs, managers, spec, volume) = (barrier.clone(), outs.clone(), managers.to_vec(), spec.clone(), volume.to_string());
            std::thread::spawn(move || {
                let mut out = WorkerOut { worker: w, ..WorkerOut::default() };
                let prepared = block_on(async {
                    let mut fs = MountedVolume::mount(TcpTransport::new(), managers, &volume, ClientConfig::default(), base + w as u64).await?;
                    let p = setup(&mut fs, &spec, w).await?;
                    Ok::<_, FsError>((fs, p))
                });
                barrier.wait();
                match prepared {
                    Ok((mut fs, p)) => {
                        // Each worker's clock starts at the shared barrier.
                        let epoch = Instant::now();
                        let clock = || epoch.elapsed().as_micros() as u64;
                        block_on(measure(&mut fs, &spec, w, p, clock, &mut out));
                    }
                    Err(e) => out.mismatches.push(format!("worker {w}: setup failed: {e}")),
                }
                outs.lock().unwrap().push(out);
            })
        })
        .collect();
    for h in handles {
        let _ = h.join();
    }
    let mut outs = std::mem::take(&mut *outs.lock().unwrap());
    outs.sort_by_key(|o| o.worker);
    let (violations, note) = block_on(async {
        match MountedVolume::mount(TcpTransport::new(), managers.to_vec(), volume, ClientConfig::default(), probe_id.wrapping_add(1)).await {
            Ok(mut fs) => namespace_census(&mut fs).await,
            Err(e) => (vec![format!("census: mount failed: {e}")], "client namespace walk".into()),
        }
    });
    Ok(aggregate(spec, format!("tcp:{}", managers[0].addr), "wall", &outs, violations, note))
}

/// Walks the namespace from the root through the client API: every dentry
/// must resolve to an inode, no directory may have two names and no file
/// may have more names than links.
pub async fn namespace_census<T: Transport>(fs: &mut MountedVolume<T>) -> (Vec<String>, String) {
    fs.drop_caches();
    let mut violations = Vec::new();
    let mut names: BTreeMap<InodeId, (InodeType, u32, Vec<String>)> = BTreeMap::new();
    let mut seen_dirs = BTreeSet::from([ROOT_INODE]);
    let mut stack = vec![String::new()];
    let mut entries = 0usize;
    while let Some(dir) = stack.pop() {
        let listing = match fs.list_dir(if dir.is_empty() { "/" } else { &dir }).await {
            Ok(l) => l,
            Err(e) => {
                violations.push(format!("census: cannot list {dir}/: {e}"));
                continue;
            }
        };
        for (d, inode) in listing {
            entries += 1;
            let path = format!("{dir}/{}", d.name);
            let Some(inode) = inode else {
                violations.push(format!("dangling dentry: {path} -> inode {}", d.child));
                continue;
            };
            let e = names.entry(inode.id).or_insert((inode.kind, inode.nlink, Vec::new()));
            e.2.push(path.clone());
            if inode.kind == InodeType::Directory {
                if seen_dirs.insert(inode.id) {
                    stack.push(path);
                } else {
                    violations.push(format!("directory inode {} has several names", inode.id));
                }
            }
        }
    }
    for (id, (kind, nlink, paths)) in &names {
        if *kind != InodeType::Directory && (*nlink as usize) < paths.len() {
            violations.push(format!("inode {}: {} names but nlink {nlink}", id, paths.len()));
        }
    }
    (violations, format!("client namespace walk: {entries} dentries, {} inodes", names.len()))
}
