//! Acceptance suite. Runs each criterion in turn and prints one PASS/FAIL
//! line per criterion; exits non-zero if any fails. Pass criterion numbers
//! or name fragments as arguments to run a subset.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::time::Instant;

use cfs_bench::runner::{run_sim, SimTarget, Verdict};
use cfs_bench::workload::{WorkloadKind, WorkloadSpec};
use cfs_core::client::{ClientConfig, FsError};
use cfs_core::extent::ExtentError;
use cfs_core::manager::{ClusterState, ManagerConfig};
use cfs_core::proto::{AdminOp, AdminReply, ManagerCmd, Message, MetaOp, NodeSpec, Request};
use cfs_core::types::{Endpoint, ExtentKey, NodeId, NodeKind, PartitionId, PartitionKind, MAX_INODE_ID};
use cfs_simnet::census::{self, Accounting};
use cfs_simnet::cluster::{self, VolumeSpec};
use cfs_simnet::scenarios::{self, CrashRole};
use cfs_simnet::script::{FaultScript, Trace};
use cfs_simnet::{run, run_on, RunConfig, Sim, SimConfig, SimTransport, TraceGen, TraceResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "model-equivalence", model_equivalence),
        (2, "expansion-without-rebalancing", expansion_without_rebalancing),
        (3, "committed-prefix-reads-under-crashes", committed_prefix_reads),
        (4, "meta-partition-splits", meta_partition_splits),
        (5, "orphan-containment", orphan_containment),
        (6, "grouped-heartbeats", grouped_heartbeats),
        (7, "small-file-hole-accounting", small_file_holes),
        (8, "crc-corruption-detection", crc_detection),
        (9, "file-creation-scaling", file_creation_scaling),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |n: u32, name: &str| filters.is_empty() || filters.iter().any(|f| f == &n.to_string() || name.contains(f.as_str()));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if !selected(n, name) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = f();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("acceptance {n} {name}: {verdict} ({}; {:.1} s)", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn sim(topology: &[NodeSpec], seed: u64) -> Sim {
    Sim::new(topology, SimConfig { seed, ..SimConfig::default() })
}

/// Random single-client traces on a 3-meta/3-data cluster must leave the
/// same namespace and bytes as the in-memory model.
fn model_equivalence() -> Outcome {
    let start = Instant::now();
    let topo = cluster::default_topology();
    let (mut mismatched, mut total_ops, mut first) = (0, 0, String::new());
    for seed in 0..1000u64 {
        // 100 to 500 ops per trace.
        let gen = TraceGen { ops: 100 + (seed as usize * 37) % 401, ..TraceGen::default() };
        let trace = gen.generate(seed);
        total_ops += trace.ops.len();
        let r = run(&topo, &FaultScript::default(), &trace, seed);
        if !r.passed() {
            mismatched += 1;
            if first.is_empty() {
                first = format!("; seed {seed}: {}", r.report().lines().take(6).collect::<Vec<_>>().join(" | "));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(mismatched == 0 && secs < 300.0, format!("1000 traces, {total_ops} ops, {mismatched} mismatched, {secs:.0} s of 300 s budget{first}"))
}

fn replica_map(sim: &Sim, volume: &str) -> BTreeMap<PartitionId, Vec<NodeId>> {
    let c = sim.manager_leader().and_then(|m| sim.node(m).cluster()).expect("manager leader");
    c.partitions.values().filter(|p| p.volume == volume).map(|p| (p.id, p.replicas.iter().map(|r| r.node).collect())).collect()
}

/// Writes `files` through one client and returns their contents.
fn write_files(sim: &mut Sim, seed: u64, files: usize, sizes: std::ops::RangeInclusive<usize>) -> Option<BTreeMap<String, Vec<u8>>> {
    let managers = sim.managers();
    sim.block_on(3_600_000, move |t: SimTransport| async move {
        let mut fs = cluster::mount(t, managers, "vol", ClientConfig::default()).await.ok()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = BTreeMap::new();
        for i in 0..files {
            let path = format!("/f{i}");
            let mut data = vec![0u8; rng.gen_range(sizes.clone())];
            rng.fill(&mut data[..]);
            let mut h = fs.create_open(&path).await.ok()?;
            fs.write(&mut h, &data).await.ok()?;
            fs.close(h).await.ok()?;
            out.insert(path, data);
        }
        Some(out)
    })
    .flatten()
}

/// Reads every file back through a fresh client; returns the paths whose
/// bytes differ or could not be read.
fn unreadable(sim: &mut Sim, files: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let managers = sim.managers();
    let files = files.clone();
    sim.block_on(3_600_000, move |t: SimTransport| async move {
        let Ok(mut fs) = cluster::mount(t, managers, "vol", ClientConfig::default()).await else {
            return vec!["mount failed".to_string()];
        };
        let mut bad = Vec::new();
        for (p, want) in &files {
            match fs.read_file(p).await {
                Ok(got) if &got == want => {}
                Ok(got) => bad.push(format!("{p}: {} bytes, expected {}", got.len(), want.len())),
                Err(e) => bad.push(format!("{p}: {e}")),
            }
        }
        bad
    })
    .unwrap_or_else(|| vec!["read-back did not finish".into()])
}

fn census_violations(sim: &Sim, acct: &Accounting) -> Vec<String> {
    let mut c = census::capture(sim, "vol");
    c.check(sim, acct).iter().map(|v| v.to_string()).collect()
}

/// A volume on four data nodes gets 200 files, then four more nodes join
/// and the volume expands: existing partitions keep their replicas and all
/// files stay readable.
fn expansion_without_rebalancing() -> Outcome {
    let topo = cluster::topology(3, 3, 4);
    let mut sim = sim(&topo, 2);
    let vol = VolumeSpec { meta: 3, data: 4, ..VolumeSpec::default() };
    if let Err(e) = cluster::create_volume(&mut sim, &vol) {
        return outcome(false, format!("bootstrap: {e}"));
    }
    let Some(files) = write_files(&mut sim, 2, 200, 1..=256 * 1024) else { return outcome(false, "writing files failed") };
    sim.run_for(2_000);
    let before = replica_map(&sim, "vol");
    let next = topo.iter().map(|n| n.id.0).max().unwrap() + 1;
    let added: Vec<NodeSpec> = (next..next + 4)
        .map(|id| NodeSpec { id: NodeId(id), kind: NodeKind::Data, addr: format!("sim:{id}"), capacity: 64 << 30, raft_set: 9 })
        .collect();
    for spec in &added {
        sim.add_node(spec.clone());
        if let Err(e) = cluster::admin(&mut sim, 30_000, AdminOp::AddNode(spec.clone())) {
            return outcome(false, format!("adding node {}: {e}", spec.id));
        }
    }
    sim.run_for(2_000);
    if let Err(e) = cluster::admin(&mut sim, 30_000, AdminOp::ExpandVolume { volume: "vol".into(), count: Some(4) }) {
        return outcome(false, format!("expand: {e}"));
    }
    sim.run_for(3_000);
    let after = replica_map(&sim, "vol");
    let moved: Vec<_> = before.iter().filter(|(id, nodes)| after.get(id) != Some(nodes)).map(|(id, _)| *id).collect();
    let new_ids: BTreeSet<NodeId> = added.iter().map(|n| n.id).collect();
    let new_parts: Vec<_> = after.keys().filter(|id| !before.contains_key(id)).collect();
    let on_new = new_parts.iter().filter(|id| after[id].iter().any(|n| new_ids.contains(n))).count();
    let bad = unreadable(&mut sim, &files);
    let violations = census_violations(&sim, &Accounting::default());
    let pass = moved.is_empty() && new_parts.len() == 4 && bad.is_empty() && violations.is_empty();
    outcome(
        pass,
        format!(
            "{} partitions before, {} unchanged, {} moved; {} new partitions, {on_new} using added nodes; {} of 200 files byte-exact; {} census violations{}",
            before.len(),
            before.len() - moved.len(),
            moved.len(),
            new_parts.len(),
            200 - bad.len(),
            violations.len(),
            bad.first().map(|b| format!("; first bad: {b}")).unwrap_or_default()
        ),
    )
}

/// Leader and follower crashes in the middle of 100 appends: readers only
/// see acknowledged prefixes, final content equals the acknowledged bytes
/// and commit cursors never move back.
fn committed_prefix_reads() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (role, seed) in [(CrashRole::Leader, 31), (CrashRole::Follower, 32)] {
        let r = scenarios::append_crash(seed, role, 100, 40);
        let ok = r.passed() && r.acked + r.failed == 100;
        pass &= ok;
        parts.push(format!(
            "{role:?} crash: {} acked, {} failed, {} reads, {} bad reads, {} final diffs, {} violations",
            r.acked,
            r.failed,
            r.reads,
            r.bad_reads.len(),
            r.final_diffs.len(),
            r.violations.len()
        ));
    }
    outcome(pass, parts.join("; "))
}

/// Inode ranges of the volume's meta partitions, from the manager.
fn meta_ranges(sim: &Sim) -> Vec<(PartitionId, u64, u64)> {
    let c = sim.manager_leader().and_then(|m| sim.node(m).cluster()).expect("manager leader");
    c.partitions.values().filter(|p| p.volume == "vol" && p.kind == PartitionKind::Meta).map(|p| (p.id, p.start, p.end)).collect()
}

/// Range checks over a census: ids unique, each inode inside the range of
/// the partition holding it, ranges disjoint and covering [1, MAX].
fn range_problems(sim: &Sim) -> Vec<String> {
    let c = census::capture(sim, "vol");
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for m in &c.meta {
        for i in &m.inodes {
            if !seen.insert(i.id) {
                out.push(format!("inode {} allocated twice", i.id));
            }
            if i.id < m.start || i.id > m.end {
                out.push(format!("inode {} outside partition {} range [{}, {}]", i.id, m.id, m.start, m.end));
            }
        }
    }
    let mut ranges: Vec<(u64, u64)> = c.meta.iter().map(|m| (m.start, m.end)).collect();
    ranges.sort();
    let mut next = 1u64;
    for (s, e) in &ranges {
        if *s != next {
            out.push(format!("range starts at {s}, expected {next}"));
        }
        next = e.saturating_add(1);
    }
    if ranges.last().map(|r| r.1) != Some(MAX_INODE_ID) {
        out.push("ranges do not reach the maximum id".into());
    }
    out
}

/// Spawns `clients` tasks that each create `files` files in their own
/// directory. Clients refresh their partition view every second so new
/// partitions get used soon after a split. Returns the number of failed
/// creates.
fn concurrent_creates(sim: &mut Sim, tag: &str, clients: usize, files: usize) -> Rc<RefCell<usize>> {
    let failures: Rc<RefCell<usize>> = Rc::default();
    for c in 0..clients {
        let (managers, failures, dir) = (sim.managers(), failures.clone(), format!("/{tag}{c}"));
        sim.spawn(move |t: SimTransport| async move {
            let cfg = ClientConfig { view_ttl_ms: 1_000, ..ClientConfig::default() };
            let Ok(mut fs) = cluster::mount(t, managers, "vol", cfg).await else {
                *failures.borrow_mut() += files;
                return;
            };
            if fs.mkdir(&dir).await.is_err() {
                *failures.borrow_mut() += files;
                return;
            }
            for i in 0..files {
                if fs.create_file(&format!("{dir}/f{i}")).await.is_err() {
                    *failures.borrow_mut() += 1;
                }
            }
        });
    }
    failures
}

/// Splits driven by item counts while clients create files, plus the
/// hand-computed case: maxInodeID 1000 with delta 16384 gives [1, 17384]
/// and [17385, MAX].
fn meta_partition_splits() -> Outcome {
    const PER_CLIENT: usize = 1000;
    let mut notes = Vec::new();
    let mut pass = true;

    // The split arithmetic on the manager state machine alone.
    {
        let nodes: Vec<NodeSpec> = cluster::topology(0, 3, 3);
        let mut s = ClusterState::new(ManagerConfig::default(), nodes);
        let created = s.apply(0, &ManagerCmd::Admin(AdminOp::CreateVolume { name: "v".into(), replicas: 3, meta: 1, data: 1, small_file_threshold: None }));
        let pid = s.sentinel("v").map(|p| p.id);
        let r = pid.map(|pid| s.apply(0, &ManagerCmd::Split { partition: pid, end: 1000 + s.cfg.split_delta }));
        let ok = created.is_ok()
            && matches!(&r, Some(Ok(AdminReply::Split { old, new })) if (old.start, old.end) == (1, 17384) && (new.start, new.end) == (17385, MAX_INODE_ID));
        pass &= ok;
        notes.push(format!("state machine split {}", if ok { "[1,17384]/[17385,MAX]" } else { "wrong" }));
    }

    // The same case end to end: 999 files after the root put maxInodeID at
    // 1000, then an administrator split.
    {
        let mut sim = sim(&cluster::default_topology(), 41);
        let vol = VolumeSpec { meta: 1, ..VolumeSpec::default() };
        let r = cluster::create_volume(&mut sim, &vol).map_err(|e| e.to_string()).and_then(|_| {
            let managers = sim.managers();
            sim.block_on(3_600_000, move |t: SimTransport| async move {
                let mut fs = cluster::mount(t, managers, "vol", ClientConfig::default()).await?;
                for i in 0..999 {
                    fs.create_file(&format!("/f{i}")).await?;
                }
                Ok::<_, FsError>(())
            })
            .ok_or("creates did not finish".to_string())?
            .map_err(|e| e.to_string())
        });
        sim.run_for(2_000);
        let pid = meta_ranges(&sim).first().map(|r| r.0);
        let max = pid.and_then(|p| sim.leader_of(p).and_then(|n| sim.node(n).meta_partition(p)).map(|m| m.max_inode_id()));
        let split = pid.map(|p| cluster::admin(&mut sim, 30_000, AdminOp::SplitPartition { partition: p }));
        let exact = matches!(&split, Some(Ok(AdminReply::Split { old, new })) if (old.start, old.end) == (1, 17384) && (new.start, new.end) == (17385, MAX_INODE_ID));
        // Creates after the split land on both sides of the boundary.
        let failures = concurrent_creates(&mut sim, "after", 3, 100);
        let finished = sim.run_tasks(3_600_000);
        sim.run_for(2_000);
        let problems = range_problems(&sim);
        let c = census::capture(&sim, "vol");
        let above = c.meta.iter().filter(|m| m.start == 17385).map(|m| m.inodes.len()).sum::<usize>();
        let ok = r.is_ok() && max == Some(1000) && exact && finished && *failures.borrow() == 0 && problems.is_empty() && above > 0;
        pass &= ok;
        notes.push(format!(
            "cluster: maxInodeID {max:?}, split {}, {above} inodes allocated above 17384 afterwards, {} range problems{}",
            if exact { "[1,17384]/[17385,MAX]" } else { "wrong" },
            problems.len(),
            r.err().map(|e| format!(", setup error {e}")).unwrap_or_default()
        ));
    }

    // Automatic splits under concurrent creates with a small item limit.
    {
        let mut cfg = SimConfig { seed: 42, ..SimConfig::default() };
        cfg.node.manager.split_items = 40;
        let mut sim = Sim::new(&cluster::default_topology(), cfg);
        let vol = VolumeSpec { meta: 1, ..VolumeSpec::default() };
        if let Err(e) = cluster::create_volume(&mut sim, &vol) {
            return outcome(false, format!("bootstrap: {e}"));
        }
        let failures = concurrent_creates(&mut sim, "c", 4, PER_CLIENT);
        let finished = sim.run_tasks(3_600_000);
        sim.run_for(3_000);
        let splits = meta_ranges(&sim).len() - 1;
        let problems = range_problems(&sim);
        let violations = census_violations(&sim, &Accounting::default());
        let ok = finished && splits >= 5 && *failures.borrow() == 0 && problems.is_empty() && violations.is_empty();
        pass &= ok;
        notes.push(format!(
            "automatic: {splits} splits during {} concurrent creates, {} failed creates, {} range problems, {} census violations{}",
            4 * PER_CLIENT,
            failures.borrow(),
            problems.len(),
            violations.len(),
            problems.first().or(violations.first()).map(|p| format!(" (first: {p})")).unwrap_or_default()
        ));
    }
    outcome(pass, notes.join("; "))
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Traces where the second step of create, link and unlink fails: every
/// attempt of a chosen dentry insert or inode unlink is dropped, or its
/// reply is lost so the client cannot tell whether it happened.
fn orphan_containment() -> Outcome {
    let topo = cluster::default_topology();
    let (mut bad, mut dropped, mut orphans, mut unsettled, mut first) = (0, 0u64, 0, 0, String::new());
    for seed in 0..500u64 {
        let mut sim = sim(&topo, seed);
        if let Err(e) = cluster::create_volume(&mut sim, &VolumeSpec::default()) {
            bad += 1;
            first = format!("seed {seed}: bootstrap {e}");
            continue;
        }
        // Replies to drop, by (client, rid).
        let lost_replies: Rc<RefCell<BTreeSet<(u64, u64)>>> = Rc::default();
        let lr = lost_replies.clone();
        sim.set_drop_filter(Some(Box::new(move |from, to, m| match (from, to, m) {
            (Endpoint::Client(c), _, Message::Request { rid, req: Request::Meta { session: Some(s), op, .. } }) => {
                if !matches!(op, MetaOp::CreateDentry { .. } | MetaOp::UnlinkInode { .. }) {
                    return false;
                }
                match mix(seed, s.client ^ (s.seq << 20)) % 8 {
                    0 => true,
                    1 => {
                        lr.borrow_mut().insert((c, *rid));
                        false
                    }
                    _ => false,
                }
            }
            (_, Endpoint::Client(c), Message::Response { rid, .. }) => lr.borrow().contains(&(c, *rid)),
            _ => false,
        })));
        let trace: Trace = TraceGen { ops: 150, ..TraceGen::default() }.generate(seed ^ 0x0c0f);
        let cfg = RunConfig { compare_ops: false, sim: SimConfig { seed, ..SimConfig::default() }, ..RunConfig::default() };
        let mut res = TraceResult::new(seed);
        res.bootstrapped = true;
        let before = sim.counters.dropped;
        run_on(&mut sim, &FaultScript::default(), &trace, &cfg, &mut res);
        dropped += sim.counters.dropped - before;
        orphans += res.orphans;
        unsettled += res.unsettled;
        if !res.finished || !res.violations.is_empty() || !res.final_diffs.is_empty() {
            bad += 1;
            if first.is_empty() {
                first = format!(
                    "seed {seed}: finished {}, {}",
                    res.finished,
                    res.violations.iter().map(|v| v.to_string()).chain(res.final_diffs.iter().cloned()).take(3).collect::<Vec<_>>().join(" | ")
                );
            }
        }
    }
    outcome(
        bad == 0,
        format!(
            "500 traces, {dropped} messages dropped, {orphans} orphans and {unsettled} unresolved creates accounted, {bad} traces with dangling or unaccounted inodes{}",
            if first.is_empty() { String::new() } else { format!("; {first}") }
        ),
    )
}

/// Nine nodes in three raft sets exchange 18 heartbeats per interval; the
/// same nodes in one set exchange 72.
fn grouped_heartbeats() -> Outcome {
    let topo = cluster::default_topology();
    let grouped = scenarios::heartbeats_per_interval(&topo, 1, 3_000, 10);
    let flat = scenarios::heartbeats_per_interval(&scenarios::ungrouped(&topo), 1, 3_000, 10);
    // Each node heartbeats every other member of its set once per interval.
    let expect = |t: &[NodeSpec]| {
        let mut sets: BTreeMap<u32, u64> = BTreeMap::new();
        for n in t {
            *sets.entry(n.raft_set).or_default() += 1;
        }
        sets.values().map(|k| k * (k - 1)).sum::<u64>()
    };
    let (eg, ef) = (expect(&topo), expect(&scenarios::ungrouped(&topo)));
    let pass = eg == 18 && ef == 72 && grouped.iter().all(|n| *n == eg) && flat.iter().all(|n| *n == ef);
    outcome(pass, format!("grouped {grouped:?} (expected {eg}), ungrouped {flat:?} (expected {ef})"))
}

fn all_replica_bytes(sim: &Sim) -> (u64, u64) {
    let (mut used, mut holes) = (0, 0);
    for (_, n) in sim.nodes() {
        for pid in n.hosted().collect::<Vec<_>>() {
            if let Some(d) = n.data_state(pid) {
                used += d.part.used_bytes();
                holes += d.part.extent_states().iter().filter_map(|s| d.part.extent(s.id)).flat_map(|e| e.holes()).map(|(_, l)| l).sum::<u64>();
            }
        }
    }
    (used, holes)
}

/// 1000 small files of 1 to 128 KiB, then half deleted: deleted ranges read
/// as holes, used bytes drop by exactly the punched bytes and survivors
/// read back unchanged.
fn small_file_holes() -> Outcome {
    let mut sim = sim(&cluster::default_topology(), 7);
    if let Err(e) = cluster::create_volume(&mut sim, &VolumeSpec::default()) {
        return outcome(false, format!("bootstrap: {e}"));
    }
    let Some(files) = write_files(&mut sim, 7, 1000, 1024..=128 * 1024) else { return outcome(false, "writing files failed") };
    sim.run_for(2_000);
    let c0 = census::capture(&sim, "vol");
    let (used0, holes0) = (c0.used_bytes(), c0.hole_bytes());
    let (all_used0, all_holes0) = all_replica_bytes(&sim);
    let doomed: BTreeMap<String, Vec<u8>> = files.iter().filter(|(p, _)| p[2..].parse::<usize>().unwrap() % 2 == 0).map(|(p, d)| (p.clone(), d.clone())).collect();
    let survivors: BTreeMap<String, Vec<u8>> = files.iter().filter(|(p, _)| !doomed.contains_key(*p)).map(|(p, d)| (p.clone(), d.clone())).collect();
    // Oracle: the bytes the deletions must free.
    let expected_freed: u64 = doomed.values().map(|d| d.len() as u64).sum();

    let managers = sim.managers();
    let paths: Vec<String> = doomed.keys().cloned().collect();
    let deleted = sim.block_on(3_600_000, move |t: SimTransport| async move {
        let mut fs = cluster::mount(t, managers, "vol", ClientConfig::default()).await.ok()?;
        let mut keys: Vec<ExtentKey> = Vec::new();
        let mut small = 0;
        for p in &paths {
            let ino = fs.stat(p).await.ok()?;
            small += usize::from(ino.extents.len() == 1);
            keys.extend(ino.extents.iter().copied());
            fs.delete_file(p).await.ok()?;
        }
        fs.evict_orphans().await;
        let mut still_named = 0;
        for p in &paths {
            if !matches!(fs.read_file(p).await, Err(FsError::NotFound)) {
                still_named += 1;
            }
        }
        Some((keys, small, still_named))
    });
    let Some(Some((keys, small, still_named))) = deleted else { return outcome(false, "deleting files failed") };
    sim.run_for(6_000);
    let c1 = census::capture(&sim, "vol");
    let (used1, holes1) = (c1.used_bytes(), c1.hole_bytes());
    let (all_used1, all_holes1) = all_replica_bytes(&sim);
    // Raw reads of the deleted ranges on every replica must hit holes.
    let mut readable = 0;
    for k in &keys {
        for (_, n) in sim.nodes() {
            if let Some(d) = n.data_state(k.partition_id) {
                if !matches!(d.part.read(k.extent_id, k.extent_offset, k.size), Err(ExtentError::HoleRead)) {
                    readable += 1;
                }
            }
        }
    }
    let bad = unreadable(&mut sim, &survivors);
    let freed = used0 - used1;
    let punched = holes1 - holes0;
    let replicas = VolumeSpec::default().replicas as u64;
    let pass = small == doomed.len()
        && still_named == 0
        && freed == punched
        && punched == expected_freed
        && all_used0 - all_used1 == replicas * expected_freed
        && all_holes1 - all_holes0 == replicas * expected_freed
        && readable == 0
        && bad.is_empty();
    outcome(
        pass,
        format!(
            "deleted {} files of {expected_freed} bytes; usedBytes fell by {freed}, holes grew by {punched} (all replicas: {} and {}); {readable} deleted ranges still readable; {} of {} survivors byte-exact",
            doomed.len(),
            all_used0 - all_used1,
            all_holes1 - all_holes0,
            survivors.len() - bad.len(),
            survivors.len()
        ),
    )
}

/// Flips one random committed byte on one replica per trial; a read over
/// it must fail the CRC check there, and clients must never see the
/// corrupted bytes.
fn crc_detection() -> Outcome {
    let mut sim = sim(&cluster::default_topology(), 8);
    if let Err(e) = cluster::create_volume(&mut sim, &VolumeSpec::default()) {
        return outcome(false, format!("bootstrap: {e}"));
    }
    let Some(files) = write_files(&mut sim, 8, 20, 200 * 1024..=1024 * 1024) else { return outcome(false, "writing files failed") };
    sim.run_for(2_000);
    let managers = sim.managers();
    let paths: Vec<String> = files.keys().cloned().collect();
    let Some(Some(keys)) = sim.block_on(600_000, move |t: SimTransport| async move {
        let mut fs = cluster::mount(t, managers, "vol", ClientConfig::default()).await.ok()?;
        let mut out = Vec::new();
        for p in &paths {
            out.push((p.clone(), fs.stat(p).await.ok()?.extents));
        }
        Some(out)
    }) else {
        return outcome(false, "stat failed")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut detected, mut leaked, mut clean_after) = (0, 0, 0);
    let trials = 100;
    for _ in 0..trials {
        let (path, ks) = &keys[rng.gen_range(0..keys.len())];
        let k = ks[rng.gen_range(0..ks.len())];
        let off = k.extent_offset + rng.gen_range(0..k.size);
        let replicas = replica_map(&sim, "vol")[&k.partition_id].clone();
        let node = replicas[rng.gen_range(0..replicas.len())];
        let part = |sim: &mut Sim| sim.node_mut(node).data_partition_mut(k.partition_id).map(|p| p.corrupt_byte(k.extent_id, off));
        if !matches!(part(&mut sim), Some(Ok(()))) {
            continue;
        }
        // Read a random window that covers the flipped byte.
        let lo = rng.gen_range(k.extent_offset..=off);
        let hi = rng.gen_range(off + 1..=k.extent_offset + k.size);
        let read = sim.node(node).data_state(k.partition_id).map(|d| d.part.read(k.extent_id, lo, hi - lo));
        if matches!(read, Some(Err(ExtentError::CrcMismatch { .. }))) {
            detected += 1;
        }
        let (managers, p, want) = (sim.managers(), path.clone(), files[path].clone());
        let client = sim.block_on(600_000, move |t: SimTransport| async move {
            let mut fs = cluster::mount(t, managers, "vol", ClientConfig::default()).await.ok()?;
            Some(fs.read_file(&p).await.map(|got| got == want))
        });
        if matches!(client, Some(Some(Ok(false)))) {
            leaked += 1;
        }
        // Flip it back.
        let _ = part(&mut sim);
        if sim.node(node).data_state(k.partition_id).is_some_and(|d| d.part.read(k.extent_id, lo, hi - lo).is_ok()) {
            clean_after += 1;
        }
    }
    outcome(
        detected == trials && leaked == 0 && clean_after == trials,
        format!("{detected} of {trials} corruptions detected, {leaked} client reads returned corrupted bytes, {clean_after} ranges clean after repair"),
    )
}

/// Aggregate FileCreation throughput with 1, 2, 3 and 4 clients on a volume
/// with four meta partitions must not decrease.
fn file_creation_scaling() -> Outcome {
    let target = SimTarget::default();
    assert!(target.volume.meta >= 4);
    let mut iops = Vec::new();
    let mut failed = Vec::new();
    for clients in 1..=4 {
        let spec = WorkloadSpec { kind: WorkloadKind::FileCreation, clients, procs: 1, ops: 800, seed: 9, ..WorkloadSpec::default() };
        match run_sim(&spec, &target) {
            Ok(r) => {
                if r.verdict != Verdict::Passed || r.ok != 800 {
                    failed.push(format!("{clients} clients: {} ok, {:?}", r.ok, r.verdict));
                }
                iops.push(r.iops);
            }
            Err(e) => {
                failed.push(format!("{clients} clients: {e}"));
                iops.push(0.0);
            }
        }
    }
    let monotone = iops.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = iops.iter().map(|v| format!("{v:.1}")).collect();
    outcome(
        monotone && failed.is_empty(),
        format!("IOPS (virtual time) for 1..4 clients: {}{}", shown.join(", "), if failed.is_empty() { String::new() } else { format!("; {}", failed.join("; ")) }),
    )
}
