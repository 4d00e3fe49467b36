//! Trace replay against a simulated cluster, checked against the
//! reference model and the census.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use cfs_core::client::{ClientConfig, FsError, MountedVolume, Transport};
use cfs_core::proto::NodeSpec;
use cfs_core::types::InodeType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::census::{self, Accounting, Violation};
use crate::cluster::{self, VolumeSpec};
use crate::model::{error_class, ModelFs, Outcome, Snapshot};
use crate::script::{trace_bytes, FaultScript, ScriptError, TimedOp, Trace, TraceOp};
use crate::sim::{Counters, Sim, SimConfig};
use crate::transport::SimTransport;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub client: ClientConfig,
    pub volume: VolumeSpec,
    /// Virtual time allowed for the whole trace after bootstrap.
    pub limit_ms: u64,
    /// Compare every op outcome with the reference model.
    pub compare_ops: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { sim: SimConfig::default(), client: ClientConfig::default(), volume: VolumeSpec::default(), limit_ms: 3_600_000, compare_ops: true }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub start: u64,
    pub end: u64,
    pub op: String,
    pub outcome: Outcome,
    pub expected: Outcome,
}

/// Everything a run produced. Identical inputs give an identical result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceResult {
    pub seed: u64,
    pub bootstrapped: bool,
    pub finished: bool,
    pub ops: Vec<OpRecord>,
    /// Ops whose outcome differed from the model.
    pub mismatches: Vec<String>,
    /// Paths whose final kind or content differ from the model.
    pub final_diffs: Vec<String>,
    pub violations: Vec<Violation>,
    pub counters: Counters,
    pub faults: Vec<(u64, String)>,
    /// (live, released, free-listed, dentries) at the end.
    pub census_counts: (usize, usize, usize, usize),
    pub orphans: usize,
    pub unsettled: usize,
    pub end_ms: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    passed: bool,
    bootstrapped: bool,
    finished: bool,
    ops: usize,
    op_errors: usize,
    mismatches: usize,
    final_diffs: usize,
    violations: Vec<String>,
    messages: &'a BTreeMap<&'static str, u64>,
    dropped: u64,
    duplicated: u64,
    faults_applied: usize,
    live_inodes: usize,
    released_inodes: usize,
    dentries: usize,
    orphans: usize,
    unsettled: usize,
    end_ms: u64,
}

impl TraceResult {
    /// An empty result, for callers that bootstrap the cluster themselves
    /// before `run_on`.
    pub fn new(seed: u64) -> Self {
        TraceResult {
            seed,
            bootstrapped: false,
            finished: false,
            ops: Vec::new(),
            mismatches: Vec::new(),
            final_diffs: Vec::new(),
            violations: Vec::new(),
            counters: Counters::default(),
            faults: Vec::new(),
            census_counts: (0, 0, 0, 0),
            orphans: 0,
            unsettled: 0,
            end_ms: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.bootstrapped && self.finished && self.mismatches.is_empty() && self.final_diffs.is_empty() && self.violations.is_empty()
    }

    /// Human-readable report.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "trace seed {} {verdict} at {} ms", self.seed, self.end_ms);
        for (t, f) in &self.faults {
            let _ = writeln!(s, "fault {t} {f}");
        }
        for o in &self.ops {
            let _ = writeln!(s, "op {}..{} {} -> {}", o.start, o.end, o.op, brief(&o.outcome));
        }
        for m in &self.mismatches {
            let _ = writeln!(s, "mismatch {m}");
        }
        for d in &self.final_diffs {
            let _ = writeln!(s, "final {d}");
        }
        for v in &self.violations {
            let _ = writeln!(s, "violation {v}");
        }
        let (live, released, free, dentries) = self.census_counts;
        let _ = writeln!(s, "census live={live} released={released} free={free} dentries={dentries} orphans={} unsettled={}", self.orphans, self.unsettled);
        for (k, n) in &self.counters.sent {
            let _ = writeln!(s, "messages {k} {n}");
        }
        let _ = writeln!(s, "messages dropped {} duplicated {}", self.counters.dropped, self.counters.duplicated);
        s
    }

    /// Machine-readable JSON summary.
    pub fn summary(&self) -> String {
        let (live, released, _, dentries) = self.census_counts;
        let sum = Summary {
            seed: self.seed,
            passed: self.passed(),
            bootstrapped: self.bootstrapped,
            finished: self.finished,
            ops: self.ops.len(),
            op_errors: self.ops.iter().filter(|o| matches!(o.outcome, Outcome::Err(_))).count(),
            mismatches: self.mismatches.len(),
            final_diffs: self.final_diffs.len(),
            violations: self.violations.iter().map(|v| v.to_string()).collect(),
            messages: &self.counters.sent,
            dropped: self.counters.dropped,
            duplicated: self.counters.duplicated,
            faults_applied: self.faults.len(),
            live_inodes: live,
            released_inodes: released,
            dentries,
            orphans: self.orphans,
            unsettled: self.unsettled,
            end_ms: self.end_ms,
        };
        serde_json::to_string(&sum).expect("summary serializes")
    }
}

fn brief(o: &Outcome) -> String {
    match o {
        Outcome::Ok => "ok".into(),
        Outcome::Bytes(b) => format!("{} bytes crc {:08x}", b.len(), crc(b)),
        Outcome::Names(n) => format!("[{}]", n.join(" ")),
        Outcome::Stat { kind, size, nlink } => format!("{kind:?} size {size} nlink {nlink}"),
        Outcome::Err(e) => e.clone(),
    }
}

fn crc(b: &[u8]) -> u32 {
    // FNV-1a; only used to fingerprint read results in reports.
    b.iter().fold(0x811c9dc5u32, |h, x| (h ^ *x as u32).wrapping_mul(0x01000193))
}

/// Runs one op through the client.
pub async fn exec<T: Transport>(fs: &mut MountedVolume<T>, op: &TraceOp) -> Outcome {
    let r: Result<Outcome, FsError> = async {
        Ok(match op {
            TraceOp::Mkdir(p) => fs.mkdir(p).await.map(|_| Outcome::Ok)?,
            TraceOp::Create(p) => fs.create_file(p).await.map(|_| Outcome::Ok)?,
            TraceOp::Write { path, offset, len, seed } => {
                let mut h = fs.open(path, true).await?;
                fs.write_at(&mut h, *offset, &trace_bytes(*seed, *len)).await?;
                fs.close(h).await?;
                Outcome::Ok
            }
            TraceOp::Append { path, len, seed } => {
                let mut h = fs.open(path, true).await?;
                fs.write(&mut h, &trace_bytes(*seed, *len)).await?;
                fs.close(h).await?;
                Outcome::Ok
            }
            TraceOp::Read(p) => Outcome::Bytes(fs.read_file(p).await?),
            TraceOp::Link { existing, new } => fs.link(existing, new).await.map(|_| Outcome::Ok)?,
            TraceOp::Unlink(p) => fs.unlink(p).await.map(|_| Outcome::Ok)?,
            TraceOp::Rmdir(p) => fs.rmdir(p).await.map(|_| Outcome::Ok)?,
            TraceOp::Stat(p) => {
                let i = fs.stat(p).await?;
                let size = if i.kind == InodeType::Directory { 0 } else { i.size };
                Outcome::Stat { kind: i.kind, size, nlink: i.nlink }
            }
            TraceOp::List(p) => Outcome::Names(fs.list_dir(p).await?.into_iter().map(|(d, _)| d.name).collect()),
        })
    }
    .await;
    r.unwrap_or_else(|e| Outcome::Err(error_class(&e)))
}

/// Walks the whole namespace through the client.
pub async fn client_snapshot<T: Transport>(fs: &mut MountedVolume<T>) -> Result<Snapshot, FsError> {
    fs.drop_caches();
    let mut out = BTreeMap::new();
    let mut stack = vec![String::new()];
    while let Some(dir) = stack.pop() {
        let list = fs.list_dir(if dir.is_empty() { "/" } else { &dir }).await?;
        for (d, _) in list {
            let p = format!("{dir}/{}", d.name);
            if d.kind == InodeType::Directory {
                out.insert(p.clone(), (d.kind, Vec::new()));
                stack.push(p);
            } else {
                let data = fs.read_file(&p).await?;
                out.insert(p, (d.kind, data));
            }
        }
    }
    Ok(out)
}

/// Lists the paths on which two snapshots disagree.
pub fn diff_snapshots(expected: &Snapshot, actual: &Snapshot) -> Vec<String> {
    let mut out = Vec::new();
    for (p, (k, data)) in expected {
        match actual.get(p) {
            None => out.push(format!("{p}: missing")),
            Some((k2, _)) if k2 != k => out.push(format!("{p}: kind {k2:?}, expected {k:?}")),
            Some((_, d2)) if d2 != data => {
                let first = d2.iter().zip(data).position(|(a, b)| a != b).unwrap_or(d2.len().min(data.len()));
                out.push(format!("{p}: {} bytes, expected {}; first difference at {first}", d2.len(), data.len()));
            }
            Some(_) => {}
        }
    }
    for p in actual.keys().filter(|p| !expected.contains_key(*p)) {
        out.push(format!("{p}: unexpected"));
    }
    out
}

struct ClientOut {
    ops: Vec<OpRecord>,
    mismatches: Vec<String>,
    final_diffs: Vec<String>,
    acct: Accounting,
}

/// Executes `trace` on a fresh cluster while `faults` fire. Op and fault
/// times count from the moment the volume is ready.
pub fn run(topology: &[NodeSpec], faults: &FaultScript, trace: &Trace, seed: u64) -> TraceResult {
    let mut cfg = RunConfig::default();
    cfg.sim.seed = seed;
    run_with(topology, faults, trace, &cfg)
}

/// Parses the three text inputs and runs them.
pub fn run_text(topology: &str, faults: &str, trace: &str, seed: u64) -> Result<TraceResult, ScriptError> {
    let topo = crate::script::parse_topology(topology)?;
    let faults = FaultScript::parse(faults)?;
    let trace = Trace::parse(trace)?;
    Ok(run(&topo, &faults, &trace, seed))
}

pub fn run_with(topology: &[NodeSpec], faults: &FaultScript, trace: &Trace, cfg: &RunConfig) -> TraceResult {
    let mut sim = Sim::new(topology, cfg.sim.clone());
    let mut res = TraceResult::new(cfg.sim.seed);
    if let Err(e) = cluster::create_volume(&mut sim, &cfg.volume) {
        res.violations.push(Violation { check: "bootstrap", detail: e.to_string() });
        res.end_ms = sim.now();
        return res;
    }
    res.bootstrapped = true;
    run_on(&mut sim, faults, trace, cfg, &mut res);
    res
}

/// Replays a trace on an already bootstrapped simulator.
pub fn run_on(sim: &mut Sim, faults: &FaultScript, trace: &Trace, cfg: &RunConfig, res: &mut TraceResult) {
    let base = sim.now();
    let shifted = FaultScript {
        directives: faults.directives.iter().map(|d| crate::script::Directive { at: d.at + base, action: d.action.clone() }).collect(),
    };
    sim.schedule(&shifted);
    let log_start = sim.fault_log.len();
    let counters_before = sim.counters.clone();
    let managers = sim.managers();
    let ops = trace.ops.clone();
    let (vol, ccfg, compare) = (cfg.volume.name.clone(), cfg.client.clone(), cfg.compare_ops);
    let out = sim.block_on(cfg.limit_ms, move |t: SimTransport| async move {
        let mut fs = cluster::mount(t.clone(), managers, &vol, ccfg).await.ok()?;
        let mut model = ModelFs::new();
        let mut o = ClientOut { ops: Vec::new(), mismatches: Vec::new(), final_diffs: Vec::new(), acct: Accounting::default() };
        for TimedOp { at, op } in &ops {
            let now = t.now_ms();
            if base + at > now {
                t.sleep(base + at - now).await;
            }
            let start = t.now_ms();
            let outcome = exec(&mut fs, op).await;
            let expected = model.apply(op);
            if compare && outcome != expected {
                o.mismatches.push(format!("{op}: got {}, expected {}", brief(&outcome), brief(&expected)));
            }
            o.ops.push(OpRecord { start, end: t.now_ms(), op: op.to_string(), outcome, expected });
        }
        fs.evict_orphans().await;
        match client_snapshot(&mut fs).await {
            Ok(snap) if compare => o.final_diffs = diff_snapshots(&model.snapshot(), &snap),
            Ok(_) => {}
            Err(e) => o.final_diffs.push(format!("namespace walk failed: {e}")),
        }
        o.acct.add(fs.orphans(), fs.unsettled());
        Some(o)
    });
    // Let in-flight replication settle before the census.
    sim.run_for(1_000);
    let acct = match out.flatten() {
        Some(o) => {
            res.finished = true;
            res.ops = o.ops;
            res.mismatches = o.mismatches;
            res.final_diffs = o.final_diffs;
            o.acct
        }
        None => Accounting::default(),
    };
    let mut c = census::capture(sim, &cfg.volume.name);
    res.violations.extend(c.check(sim, &acct));
    res.census_counts = c.counts();
    res.orphans = acct.orphans.len();
    res.unsettled = acct.unsettled.len();
    res.faults = sim.fault_log[log_start..].iter().map(|(t, f)| (t - base, f.clone())).collect();
    res.counters = diff_counters(&counters_before, &sim.counters);
    res.end_ms = sim.now() - base;
}

fn diff_counters(before: &Counters, after: &Counters) -> Counters {
    let mut sent = after.sent.clone();
    for (k, n) in &before.sent {
        if let Some(v) = sent.get_mut(k) {
            *v -= n;
        }
    }
    sent.retain(|_, n| *n > 0);
    Counters { sent, dropped: after.dropped - before.dropped, duplicated: after.duplicated - before.duplicated, bytes: after.bytes - before.bytes }
}

/// Random faults over `duration_ms`: at most one node down or cut off at
/// a time, plus message drops and duplicates.
pub fn random_faults(topology: &[NodeSpec], seed: u64, duration_ms: u64) -> FaultScript {
    use crate::script::{Directive, FaultAction};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
    let ids: Vec<_> = topology.iter().map(|n| n.id).collect();
    let mut out = Vec::new();
    let mut t = rng.gen_range(100..1500);
    while t < duration_ms {
        let n = ids[rng.gen_range(0..ids.len())];
        let outage = rng.gen_range(200..3000);
        match rng.gen_range(0..5) {
            0 | 1 => {
                out.push(Directive { at: t, action: FaultAction::Crash(n) });
                out.push(Directive { at: t + outage, action: FaultAction::Restart(n) });
            }
            2 => {
                out.push(Directive { at: t, action: FaultAction::Isolate(n) });
                out.push(Directive { at: t + outage, action: FaultAction::HealAll });
            }
            3 => out.push(Directive { at: t, action: FaultAction::DropNext(rng.gen_range(1..20)) }),
            _ => out.push(Directive { at: t, action: FaultAction::DuplicateNext(rng.gen_range(1..20)) }),
        }
        t += outage + rng.gen_range(100..2000);
    }
    FaultScript { directives: out }
}

/// Knobs for random traces.
#[derive(Clone, Debug)]
pub struct TraceGen {
    pub ops: usize,
    /// Gap between op start times in virtual ms.
    pub spacing_ms: u64,
    /// Probability that a write is large (up to `large_max` bytes).
    pub large_prob: f64,
    pub large_max: u64,
    pub small_max: u64,
    pub max_depth: usize,
}

impl Default for TraceGen {
    fn default() -> Self {
        Self { ops: 200, spacing_ms: 0, large_prob: 0.05, large_max: 160 * 1024, small_max: 4096, max_depth: 3 }
    }
}

const NAMES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

impl TraceGen {
    /// A random single-client trace. Most ops target existing paths; some
    /// are meant to fail.
    pub fn generate(&self, seed: u64) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ModelFs::new();
        let mut ops = Vec::with_capacity(self.ops);
        for i in 0..self.ops {
            let op = self.pick(&mut rng, &model);
            model.apply(&op);
            ops.push(TimedOp { at: i as u64 * self.spacing_ms, op });
        }
        Trace { ops }
    }

    fn pick(&self, rng: &mut ChaCha8Rng, m: &ModelFs) -> TraceOp {
        let (files, dirs) = m.paths();
        let any_dir = |rng: &mut ChaCha8Rng| dirs[rng.gen_range(0..dirs.len())].clone();
        let new_path = |rng: &mut ChaCha8Rng| {
            let d = any_dir(rng);
            let name = NAMES[rng.gen_range(0..NAMES.len())];
            if d == "/" {
                format!("/{name}")
            } else {
                format!("{d}/{name}")
            }
        };
        let file = |rng: &mut ChaCha8Rng| -> String {
            if files.is_empty() || rng.gen_bool(0.05) {
                new_path(rng)
            } else {
                files[rng.gen_range(0..files.len())].clone()
            }
        };
        let len = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(self.large_prob) {
                rng.gen_range(1..=self.large_max)
            } else {
                rng.gen_range(1..=self.small_max)
            }
        };
        match rng.gen_range(0..100) {
            0..=11 => {
                let p = new_path(rng);
                if p.matches('/').count() > self.max_depth {
                    TraceOp::Create(p)
                } else {
                    TraceOp::Mkdir(p)
                }
            }
            12..=31 => TraceOp::Create(new_path(rng)),
            32..=46 => {
                let path = file(rng);
                let size = m.file_len(&path).unwrap_or(0);
                let offset = match rng.gen_range(0..4) {
                    0 => size,
                    1 => size + rng.gen_range(0..8192),
                    _ => rng.gen_range(0..=size),
                };
                TraceOp::Write { path, offset, len: len(rng), seed: rng.gen() }
            }
            47..=56 => TraceOp::Append { path: file(rng), len: len(rng), seed: rng.gen() },
            57..=66 => TraceOp::Read(file(rng)),
            67..=74 => TraceOp::Link { existing: file(rng), new: new_path(rng) },
            75..=84 => TraceOp::Unlink(file(rng)),
            85..=89 => TraceOp::Rmdir(if dirs.len() > 1 { dirs[rng.gen_range(1..dirs.len())].clone() } else { new_path(rng) }),
            90..=94 => TraceOp::Stat(if rng.gen_bool(0.5) { file(rng) } else { any_dir(rng) }),
            _ => TraceOp::List(any_dir(rng)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_traces_are_reproducible_and_mixed() {
        let g = TraceGen { ops: 300, ..TraceGen::default() };
        let a = g.generate(5);
        assert_eq!(a, g.generate(5));
        assert_ne!(a, g.generate(6));
        let text = a.to_string();
        for verb in ["mkdir", "create", "write", "append", "read", "link", "unlink", "rmdir", "stat", "ls"] {
            assert!(text.contains(&format!(" {verb} ")), "no {verb} in trace");
        }
        assert_eq!(Trace::parse(&text).unwrap(), a);
    }

    #[test]
    fn snapshot_diff_reports_each_kind_of_difference() {
        let mut a = Snapshot::new();
        a.insert("/x".into(), (InodeType::File, vec![1, 2]));
        a.insert("/d".into(), (InodeType::Directory, vec![]));
        let mut b = a.clone();
        assert!(diff_snapshots(&a, &b).is_empty());
        b.insert("/x".into(), (InodeType::File, vec![1, 3]));
        b.remove("/d");
        b.insert("/y".into(), (InodeType::File, vec![]));
        let d = diff_snapshots(&a, &b);
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(d[0].contains("missing") || d[1].contains("missing"));
        assert!(d.iter().any(|x| x.contains("first difference at 1")));
    }
}
