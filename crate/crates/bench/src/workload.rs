//! Workload definitions and the per-worker driver. The driver is generic
//! over the transport so the same code runs in the simulator and over TCP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use cfs_core::client::{FsError, MountedVolume, Transport, Unsettled};
use cfs_core::types::InodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block size for sequential file workloads.
pub const SEQ_BLOCK: u64 = 128 * 1024;
/// Block size for random file workloads.
pub const RAND_BLOCK: u64 = 4 * 1024;
/// Files per directory in the tree workloads.
pub const TREE_FILES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WorkloadKind {
    DirCreation,
    DirStat,
    DirRemoval,
    FileCreation,
    FileRemoval,
    TreeCreation,
    TreeRemoval,
    SeqWrite,
    SeqRead,
    RandWrite,
    RandRead,
    SmallFileWrite,
    SmallFileRead,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 13] = [
        Self::DirCreation,
        Self::DirStat,
        Self::DirRemoval,
        Self::FileCreation,
        Self::FileRemoval,
        Self::TreeCreation,
        Self::TreeRemoval,
        Self::SeqWrite,
        Self::SeqRead,
        Self::RandWrite,
        Self::RandRead,
        Self::SmallFileWrite,
        Self::SmallFileRead,
    ];

    pub fn is_metadata(self) -> bool {
        (self as u8) <= Self::TreeRemoval as u8
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for WorkloadKind {
    type Err = SpecError;

    /// Accepts `FileCreation`, `filecreation` and `file-creation`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let want: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().to_lowercase() == want)
            .ok_or_else(|| SpecError(format!("unknown workload {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid workload: {0}")]
pub struct SpecError(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub clients: usize,
    pub procs: usize,
    /// Per-process file size for the sequential and random workloads.
    pub file_size: u64,
    pub small_file_size: u64,
    /// Total measured operations, split evenly across processes.
    pub ops: u64,
    pub seed: u64,
    /// Directory holding the worker directories; empty means the volume
    /// root.
    #[serde(default)]
    pub root: String,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::FileCreation,
            clients: 1,
            procs: 1,
            file_size: 40 << 20,
            small_file_size: 8 << 10,
            ops: 1000,
            seed: 1,
            root: String::new(),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let positive = [("clients", self.clients as u64), ("procs", self.procs as u64), ("ops", self.ops), ("small-file-size", self.small_file_size)];
        for (name, v) in positive {
            if v == 0 {
                return Err(SpecError(format!("{name} must be positive")));
            }
        }
        let block = match self.kind {
            WorkloadKind::SeqWrite | WorkloadKind::SeqRead => SEQ_BLOCK,
            WorkloadKind::RandWrite | WorkloadKind::RandRead => RAND_BLOCK,
            _ => 1,
        };
        if self.file_size < block {
            return Err(SpecError(format!("file-size must be at least one {block}-byte block")));
        }
        Ok(())
    }

    pub fn workers(&self) -> usize {
        self.clients * self.procs
    }

    /// Measured operations for worker `w`.
    pub fn ops_for(&self, w: usize) -> u64 {
        let n = self.workers() as u64;
        self.ops / n + u64::from((w as u64) < self.ops % n)
    }
}

/// What one worker observed.
#[derive(Clone, Debug, Default)]
pub struct WorkerOut {
    pub worker: usize,
    /// Latency of each successful measured op, in microseconds.
    pub latencies_us: Vec<u64>,
    pub start_us: u64,
    pub end_us: u64,
    pub errors: BTreeMap<String, u64>,
    /// Content or namespace checks that failed.
    pub mismatches: Vec<String>,
    pub orphans: BTreeSet<InodeId>,
    pub unsettled: Vec<Unsettled>,
}

impl WorkerOut {
    fn error(&mut self, e: &FsError) {
        *self.errors.entry(error_name(e)).or_default() += 1;
    }
}

fn error_name(e: &FsError) -> String {
    let s = format!("{e:?}");
    s.split(['(', ' ', '{']).next().unwrap_or("Error").to_string()
}

/// Deterministic bytes for worker `w`'s object `i`.
pub fn content(seed: u64, w: usize, i: u64, len: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((w as u64) << 40) ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut v = vec![0u8; len as usize];
    rng.fill(&mut v[..]);
    v
}

pub fn worker_dir(root: &str, w: usize) -> String {
    format!("{root}/w{w}")
}

/// Per-worker state built during setup.
pub struct Prepared {
    dir: String,
    /// Names in the worker directory after setup.
    names: BTreeSet<String>,
    /// Names whose create or remove failed; either outcome is accepted.
    uncertain: BTreeSet<String>,
    /// Expected content of the worker's large file.
    file: Vec<u8>,
}

/// Creates the worker directory and whatever the measured phase reads or
/// removes. Not timed.
pub async fn setup<T: Transport>(fs: &mut MountedVolume<T>, spec: &WorkloadSpec, w: usize) -> Result<Prepared, FsError> {
    use WorkloadKind::*;
    let dir = worker_dir(&spec.root, w);
    fs.mkdir(&dir).await?;
    let n = spec.ops_for(w);
    let mut p = Prepared { dir, names: BTreeSet::new(), uncertain: BTreeSet::new(), file: Vec::new() };
    match spec.kind {
        DirStat | DirRemoval => {
            for i in 0..n {
                fs.mkdir(&format!("{}/d{i}", p.dir)).await?;
                p.names.insert(format!("d{i}"));
            }
        }
        FileRemoval => {
            for i in 0..n {
                fs.create_file(&format!("{}/f{i}", p.dir)).await?;
                p.names.insert(format!("f{i}"));
            }
        }
        TreeRemoval => {
            for i in 0..n {
                make_tree(fs, &p.dir, i).await?;
                p.names.insert(format!("t{i}"));
            }
        }
        SeqRead | RandRead | RandWrite => {
            p.file = content(spec.seed, w, u64::MAX, spec.file_size);
            let mut h = fs.create_open(&format!("{}/data", p.dir)).await?;
            for chunk in p.file.chunks(SEQ_BLOCK as usize) {
                fs.write(&mut h, chunk).await?;
            }
            fs.close(h).await?;
            p.names.insert("data".into());
        }
        SeqWrite => {
            fs.create_file(&format!("{}/data", p.dir)).await?;
            p.names.insert("data".into());
        }
        SmallFileRead => {
            for i in 0..n {
                write_small(fs, &p.dir, spec, w, i).await?;
                p.names.insert(format!("s{i}"));
            }
        }
        DirCreation | FileCreation | TreeCreation | SmallFileWrite => {}
    }
    Ok(p)
}

async fn make_tree<T: Transport>(fs: &mut MountedVolume<T>, dir: &str, i: u64) -> Result<(), FsError> {
    let t = format!("{dir}/t{i}");
    fs.mkdir(&t).await?;
    for j in 0..TREE_FILES {
        fs.create_file(&format!("{t}/f{j}")).await?;
    }
    Ok(())
}

async fn remove_tree<T: Transport>(fs: &mut MountedVolume<T>, dir: &str, i: u64) -> Result<(), FsError> {
    let t = format!("{dir}/t{i}");
    for j in 0..TREE_FILES {
        fs.delete_file(&format!("{t}/f{j}")).await?;
    }
    fs.rmdir(&t).await
}

async fn write_small<T: Transport>(fs: &mut MountedVolume<T>, dir: &str, spec: &WorkloadSpec, w: usize, i: u64) -> Result<(), FsError> {
    let mut h = fs.create_open(&format!("{dir}/s{i}")).await?;
    fs.write(&mut h, &content(spec.seed, w, i, spec.small_file_size)).await?;
    fs.close(h).await
}

/// Runs worker `w`'s measured ops, then checks the worker's namespace and
/// content. `clock` returns microseconds.
pub async fn measure<T: Transport>(
    fs: &mut MountedVolume<T>,
    spec: &WorkloadSpec,
    w: usize,
    mut p: Prepared,
    clock: impl Fn() -> u64,
    out: &mut WorkerOut,
) {
    use WorkloadKind::*;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(w as u64 + 1));
    let n = spec.ops_for(w);
    let dir = p.dir.clone();
    let blocks = spec.file_size / if matches!(spec.kind, RandRead | RandWrite) { RAND_BLOCK } else { SEQ_BLOCK };
    let mut seq_handle = None;
    if spec.kind == SeqWrite {
        match fs.open(&format!("{dir}/data"), true).await {
            Ok(h) => seq_handle = Some(h),
            Err(e) => out.error(&e),
        }
    }
    out.start_us = clock();
    for i in 0..n {
        let t0 = clock();
        let r: Result<(), FsError> = match spec.kind {
            DirCreation => fs.mkdir(&format!("{dir}/d{i}")).await.map(|_| {
                p.names.insert(format!("d{i}"));
            }),
            DirStat => fs.stat(&format!("{dir}/d{i}")).await.map(|_| ()),
            DirRemoval => fs.rmdir(&format!("{dir}/d{i}")).await.map(|_| {
                p.names.remove(&format!("d{i}"));
            }),
            FileCreation => fs.create_file(&format!("{dir}/f{i}")).await.map(|_| {
                p.names.insert(format!("f{i}"));
            }),
            FileRemoval => fs.delete_file(&format!("{dir}/f{i}")).await.map(|_| {
                p.names.remove(&format!("f{i}"));
            }),
            TreeCreation => make_tree(fs, &dir, i).await.map(|_| {
                p.names.insert(format!("t{i}"));
            }),
            TreeRemoval => remove_tree(fs, &dir, i).await.map(|_| {
                p.names.remove(&format!("t{i}"));
            }),
            SeqWrite => match seq_handle.as_mut() {
                Some(h) => {
                    let off = (i % blocks) * SEQ_BLOCK;
                    let data = content(spec.seed, w, i, SEQ_BLOCK);
                    let r = fs.write_at(h, off, &data).await.map(|_| ());
                    if r.is_ok() {
                        splice(&mut p.file, off, &data);
                    }
                    r
                }
                None => Err(FsError::NotFound),
            },
            SeqRead | RandRead => {
                let b = if spec.kind == SeqRead { i % blocks } else { rng.gen_range(0..blocks) };
                let bs = if spec.kind == SeqRead { SEQ_BLOCK } else { RAND_BLOCK };
                read_check(fs, &dir, &p.file, b * bs, bs, out).await
            }
            RandWrite => {
                let off = rng.gen_range(0..blocks) * RAND_BLOCK;
                let data = content(spec.seed, w, i, RAND_BLOCK);
                let r = async {
                    let mut h = fs.open(&format!("{dir}/data"), true).await?;
                    fs.write_at(&mut h, off, &data).await?;
                    fs.close(h).await
                }
                .await;
                if r.is_ok() {
                    splice(&mut p.file, off, &data);
                }
                r
            }
            SmallFileWrite => write_small(fs, &dir, spec, w, i).await.map(|_| {
                p.names.insert(format!("s{i}"));
            }),
            SmallFileRead => match fs.read_file(&format!("{dir}/s{i}")).await {
                Ok(b) => {
                    if b != content(spec.seed, w, i, spec.small_file_size) {
                        out.mismatches.push(format!("{dir}/s{i}: content differs"));
                    }
                    Ok(())
                }
                Err(e) => Err(e),
            },
        };
        match r {
            Ok(()) => out.latencies_us.push(clock() - t0),
            Err(e) => {
                out.error(&e);
                if let Some(name) = entry_name(spec.kind, i) {
                    p.uncertain.insert(name);
                }
            }
        }
    }
    if let Some(h) = seq_handle {
        if let Err(e) = fs.close(h).await {
            out.error(&e);
        }
    }
    out.end_us = clock();
    verify(fs, spec, &p, out).await;
    fs.evict_orphans().await;
    out.orphans = fs.orphans().clone();
    out.unsettled = fs.unsettled().to_vec();
}

/// The worker-directory entry a measured op creates or removes.
fn entry_name(kind: WorkloadKind, i: u64) -> Option<String> {
    use WorkloadKind::*;
    match kind {
        DirCreation | DirRemoval => Some(format!("d{i}")),
        FileCreation | FileRemoval => Some(format!("f{i}")),
        TreeCreation | TreeRemoval => Some(format!("t{i}")),
        SmallFileWrite => Some(format!("s{i}")),
        _ => None,
    }
}

fn splice(file: &mut Vec<u8>, off: u64, data: &[u8]) {
    let end = off as usize + data.len();
    if file.len() < end {
        file.resize(end, 0);
    }
    file[off as usize..end].copy_from_slice(data);
}

async fn read_check<T: Transport>(fs: &mut MountedVolume<T>, dir: &str, expected: &[u8], off: u64, len: u64, out: &mut WorkerOut) -> Result<(), FsError> {
    let h = fs.open(&format!("{dir}/data"), false).await?;
    let got = fs.read(&h, off, len).await?;
    fs.close(h).await?;
    let want = &expected[off as usize..(off + len).min(expected.len() as u64) as usize];
    if got != want {
        out.mismatches.push(format!("{dir}/data: read at {off}+{len} differs"));
    }
    Ok(())
}

/// Post-run checks: the worker directory lists exactly the names the
/// successful ops left behind, and the large file holds what was written.
async fn verify<T: Transport>(fs: &mut MountedVolume<T>, spec: &WorkloadSpec, p: &Prepared, out: &mut WorkerOut) {
    fs.drop_caches();
    match fs.list_dir(&p.dir).await {
        Ok(entries) => {
            let got: BTreeSet<String> = entries.into_iter().map(|(d, _)| d.name).filter(|n| !p.uncertain.contains(n)).collect();
            let want: BTreeSet<String> = p.names.difference(&p.uncertain).cloned().collect();
            if got != want {
                let missing: Vec<_> = want.difference(&got).take(5).collect();
                let extra: Vec<_> = got.difference(&want).take(5).collect();
                out.mismatches.push(format!("{}: listing differs; missing {missing:?}, unexpected {extra:?}", p.dir));
            }
        }
        Err(e) => out.mismatches.push(format!("{}: listing failed: {e}", p.dir)),
    }
    if matches!(spec.kind, WorkloadKind::SeqWrite | WorkloadKind::RandWrite) {
        match fs.read_file(&format!("{}/data", p.dir)).await {
            Ok(b) if b == p.file => {}
            Ok(b) => out.mismatches.push(format!("{}/data: {} bytes, expected {}", p.dir, b.len(), p.file.len())),
            Err(e) => out.mismatches.push(format!("{}/data: read failed: {e}", p.dir)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in WorkloadKind::ALL {
            assert_eq!(k.to_string().parse::<WorkloadKind>().unwrap(), k);
        }
        assert_eq!("file-creation".parse::<WorkloadKind>().unwrap(), WorkloadKind::FileCreation);
        assert_eq!("smallfileread".parse::<WorkloadKind>().unwrap(), WorkloadKind::SmallFileRead);
        assert!("dirlist".parse::<WorkloadKind>().is_err());
        assert_eq!(WorkloadKind::ALL.iter().filter(|k| k.is_metadata()).count(), 7);
    }

    #[test]
    fn ops_split_covers_total() {
        for (ops, clients, procs) in [(1000, 1, 1), (1000, 3, 1), (7, 2, 2), (3, 4, 1)] {
            let s = WorkloadSpec { ops, clients, procs, ..WorkloadSpec::default() };
            let total: u64 = (0..s.workers()).map(|w| s.ops_for(w)).sum();
            assert_eq!(total, ops);
            let max = (0..s.workers()).map(|w| s.ops_for(w)).max().unwrap();
            let min = (0..s.workers()).map(|w| s.ops_for(w)).min().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn validation() {
        assert!(WorkloadSpec::default().validate().is_ok());
        assert!(WorkloadSpec { clients: 0, ..WorkloadSpec::default() }.validate().is_err());
        assert!(WorkloadSpec { kind: WorkloadKind::SeqRead, file_size: 1000, ..WorkloadSpec::default() }.validate().is_err());
    }

    #[test]
    fn content_is_deterministic() {
        assert_eq!(content(1, 2, 3, 100), content(1, 2, 3, 100));
        assert_ne!(content(1, 2, 3, 100), content(1, 2, 4, 100));
    }
}
