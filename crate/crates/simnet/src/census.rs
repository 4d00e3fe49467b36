//! Cluster-wide state capture and the invariant checks that run on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use cfs_core::client::Unsettled;
use cfs_core::extent::ExtentKind;
use cfs_core::meta::{Dentry, Inode};
use cfs_core::proto::{MetaReply, Response};
use cfs_core::types::{ExtentId, GroupId, InodeId, InodeType, NodeId, PartitionDescriptor, MAX_INODE_ID, MANAGER_GROUP, ROOT_INODE};

use crate::sim::Sim;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaCensus {
    pub id: GroupId,
    /// Replica the copy was taken from.
    pub replica: NodeId,
    pub start: InodeId,
    pub end: InodeId,
    pub max_inode_id: InodeId,
    pub inodes: Vec<Inode>,
    pub dentries: Vec<Dentry>,
    pub free_list: Vec<InodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtentCensus {
    pub id: ExtentId,
    pub kind: ExtentKind,
    pub local_size: u64,
    pub committed: u64,
    pub holes: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataCensus {
    pub id: GroupId,
    pub replica: NodeId,
    pub used_bytes: u64,
    pub extents: Vec<ExtentCensus>,
    pub cursor_violations: u64,
}

/// What clients know about inodes that are unreachable on purpose.
#[derive(Clone, Debug, Default)]
pub struct Accounting {
    pub orphans: BTreeSet<InodeId>,
    pub unsettled: Vec<Unsettled>,
}

impl Accounting {
    pub fn add(&mut self, orphans: &BTreeSet<InodeId>, unsettled: &[Unsettled]) {
        self.orphans.extend(orphans);
        self.unsettled.extend_from_slice(unsettled);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.check, self.detail)
    }
}

/// A snapshot of every partition, taken from the most up-to-date live
/// replica of each group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub at: u64,
    pub meta: Vec<MetaCensus>,
    pub data: Vec<DataCensus>,
    /// The volume's partitions as the manager leader knows them.
    pub partitions: Vec<PartitionDescriptor>,
    /// Structural problems found while capturing (per replica).
    pub violations: Vec<Violation>,
    /// Inodes reachable from the root.
    pub reachable: BTreeSet<InodeId>,
    /// Live inodes not reachable and not yet attributed.
    pub unreachable: BTreeSet<InodeId>,
}

fn v(check: &'static str, detail: impl Into<String>) -> Violation {
    Violation { check, detail: detail.into() }
}

/// Picks the replica to read a group from: the leader if it is up, else
/// the up replica that applied the most.
fn source(sim: &Sim, gid: GroupId) -> Option<NodeId> {
    if let Some(l) = sim.leader_of(gid) {
        return Some(l);
    }
    sim.nodes()
        .filter(|(id, n)| sim.is_up(**id) && n.hosted().any(|g| g == gid))
        .max_by_key(|(id, n)| (n.applied_index(gid).unwrap_or(0), std::cmp::Reverse(**id)))
        .map(|(id, _)| *id)
}

/// Captures every partition of `volume` and runs the structural checks.
pub fn capture(sim: &Sim, volume: &str) -> Census {
    let mut c = Census { at: sim.now(), ..Census::default() };
    if let Some(m) = sim.manager_leader().or_else(|| source(sim, MANAGER_GROUP)) {
        if let Some(cl) = sim.node(m).cluster() {
            if let Err(e) = cl.check_invariants() {
                c.violations.push(v("manager", e));
            }
            if let Ok(view) = cl.view(volume) {
                c.partitions = view.meta.into_iter().chain(view.data).collect();
            }
        }
    }
    let groups: BTreeSet<GroupId> = sim.nodes().filter(|(id, _)| sim.is_up(**id)).flat_map(|(_, n)| n.hosted().collect::<Vec<_>>()).collect();
    for gid in groups {
        if gid == MANAGER_GROUP {
            continue;
        }
        check_log_agreement(sim, gid, &mut c.violations);
        let Some(src) = source(sim, gid) else { continue };
        let node = sim.node(src);
        if let Some(mp) = node.meta_partition(gid) {
            if mp.volume != volume {
                continue;
            }
            if let Err(e) = mp.check_invariants() {
                c.violations.push(v("meta-partition", format!("partition {gid} on {src}: {e}")));
            }
            let (start, end) = mp.range();
            c.meta.push(MetaCensus {
                id: gid,
                replica: src,
                start,
                end,
                max_inode_id: mp.max_inode_id(),
                inodes: mp.inodes().cloned().collect(),
                dentries: mp.dentries().cloned().collect(),
                free_list: mp.free_list().iter().copied().collect(),
            });
        } else if let Some(ds) = node.data_state(gid) {
            if ds.part.volume != volume {
                continue;
            }
            if let Err(e) = ds.part.check_invariants() {
                c.violations.push(v("data-partition", format!("partition {gid} on {src}: {e}")));
            }
            c.data.push(DataCensus {
                id: gid,
                replica: src,
                used_bytes: ds.part.used_bytes(),
                extents: ds
                    .part
                    .extents()
                    .map(|e| ExtentCensus { id: e.id, kind: e.kind, local_size: e.local_size(), committed: e.committed(), holes: e.holes() })
                    .collect(),
                cursor_violations: ds.cursor_violations,
            });
        }
    }
    for n in sim.nodes().filter(|(id, _)| sim.is_up(**id)).map(|(_, n)| n) {
        for gid in n.hosted() {
            if let Some(ds) = n.data_state(gid) {
                if ds.cursor_violations > 0 {
                    c.violations.push(v("commit-cursor", format!("partition {gid} on {}: {} regressions", n.id(), ds.cursor_violations)));
                }
            }
        }
    }
    c
}

/// Committed entries at the same index must be identical on every replica.
fn check_log_agreement(sim: &Sim, gid: GroupId, out: &mut Vec<Violation>) {
    let mut seen: BTreeMap<u64, (u64, u32, NodeId)> = BTreeMap::new();
    for (id, n) in sim.nodes() {
        if !sim.is_up(*id) {
            continue;
        }
        for (idx, term, crc) in n.committed_entries(gid) {
            match seen.get(&idx) {
                Some(&(t, c, other)) if (t, c) != (term, crc) => {
                    out.push(v("log-agreement", format!("group {gid} index {idx}: {other} has term {t}, {id} has term {term}")));
                    return;
                }
                Some(_) => {}
                None => {
                    seen.insert(idx, (term, crc, *id));
                }
            }
        }
    }
}

impl Census {
    pub fn inode(&self, ino: InodeId) -> Option<&Inode> {
        self.meta.iter().filter(|m| m.start <= ino && ino <= m.end).find_map(|m| m.inodes.iter().find(|i| i.id == ino))
    }

    fn index(&self) -> BTreeMap<InodeId, &Inode> {
        self.meta.iter().flat_map(|m| m.inodes.iter().map(|i| (i.id, i))).collect()
    }

    fn children(&self) -> BTreeMap<InodeId, Vec<&Dentry>> {
        let mut out: BTreeMap<InodeId, Vec<&Dentry>> = BTreeMap::new();
        for d in self.meta.iter().flat_map(|m| &m.dentries) {
            out.entry(d.parent).or_default().push(d);
        }
        out
    }

    /// Every reachable path with its inode, depth first.
    pub fn paths(&self) -> BTreeMap<String, InodeId> {
        let children = self.children();
        let mut out = BTreeMap::new();
        let mut stack = vec![(ROOT_INODE, String::new())];
        let mut visited = BTreeSet::new();
        while let Some((dir, prefix)) = stack.pop() {
            if !visited.insert(dir) {
                continue;
            }
            for d in children.get(&dir).into_iter().flatten() {
                let p = format!("{prefix}/{}", d.name);
                out.insert(p.clone(), d.child);
                if d.kind == InodeType::Directory {
                    stack.push((d.child, p));
                }
            }
        }
        out
    }

    /// Runs the namespace and data checks. `acct` lists what clients know
    /// about unreachable inodes; `sim` resolves unsettled creates.
    pub fn check(&mut self, sim: &Sim, acct: &Accounting) -> Vec<Violation> {
        let mut out = self.violations.clone();
        let index = self.index();

        // Inode ranges: disjoint and covering [1, MAX].
        let mut ranges: Vec<(InodeId, InodeId)> = self.meta.iter().map(|m| (m.start, m.end)).collect();
        ranges.sort();
        let mut next = 1;
        for (s, e) in &ranges {
            if *s != next {
                out.push(v("inode-ranges", format!("range starts at {s}, expected {next}")));
            }
            next = e.saturating_add(1);
        }
        if ranges.last().map(|r| r.1) != Some(MAX_INODE_ID) {
            out.push(v("inode-ranges", "ranges do not reach the maximum inode id"));
        }
        let total: usize = self.meta.iter().map(|m| m.inodes.len()).sum();
        if total != index.len() {
            out.push(v("inode-ids", format!("{} inodes but {} distinct ids", total, index.len())));
        }

        // Dangling dentries and link counts.
        let mut refs: BTreeMap<InodeId, u32> = BTreeMap::new();
        for d in self.meta.iter().flat_map(|m| &m.dentries) {
            match index.get(&d.child) {
                Some(i) if !i.is_deleted() => *refs.entry(d.child).or_default() += 1,
                Some(_) => out.push(v("dangling-dentry", format!("{}/{} -> released inode {}", d.parent, d.name, d.child))),
                None => out.push(v("dangling-dentry", format!("{}/{} -> missing inode {}", d.parent, d.name, d.child))),
            }
        }

        let paths = self.paths();
        let reachable: BTreeSet<InodeId> = paths.values().copied().chain([ROOT_INODE]).collect();
        let unsettled_inodes: BTreeSet<InodeId> = acct.unsettled.iter().filter_map(|u| u.inode).collect();
        for (ino, i) in &index {
            if i.kind != InodeType::Directory && !i.is_deleted() {
                let r = refs.get(ino).copied().unwrap_or(0);
                if i.nlink < r {
                    out.push(v("link-count", format!("inode {ino} has {} links but {r} names", i.nlink)));
                }
            }
        }

        // Unreachable live inodes must be known orphans or tied to an
        // unsettled operation.
        let mut pending_creates: BTreeMap<GroupId, usize> = BTreeMap::new();
        let mut resolved: BTreeSet<InodeId> = BTreeSet::new();
        for u in acct.unsettled.iter().filter(|u| u.inode.is_none()) {
            match created_by(sim, u) {
                Some(ino) => {
                    resolved.insert(ino);
                }
                None => *pending_creates.entry(u.partition).or_default() += 1,
            }
        }
        let mut unreachable = BTreeSet::new();
        for (ino, i) in &index {
            if i.is_deleted() || reachable.contains(ino) {
                continue;
            }
            if acct.orphans.contains(ino) || unsettled_inodes.contains(ino) || resolved.contains(ino) {
                continue;
            }
            let part = self.meta.iter().find(|m| m.start <= *ino && *ino <= m.end).map(|m| m.id).unwrap_or(0);
            match pending_creates.get_mut(&part) {
                Some(n) if *n > 0 => *n -= 1,
                _ => {
                    unreachable.insert(*ino);
                    out.push(v("orphan-accounting", format!("inode {ino} is unreachable and unaccounted")));
                }
            }
        }

        // Content of live files must be present, committed and not punched.
        let extents: BTreeMap<(GroupId, ExtentId), &ExtentCensus> =
            self.data.iter().flat_map(|d| d.extents.iter().map(move |e| ((d.id, e.id), e))).collect();
        let data_ids: BTreeSet<GroupId> = self.data.iter().map(|d| d.id).collect();
        for i in index.values().filter(|i| !i.is_deleted()) {
            for k in &i.extents {
                if !data_ids.contains(&k.partition_id) {
                    continue;
                }
                let Some(e) = extents.get(&(k.partition_id, k.extent_id)) else {
                    out.push(v("file-content", format!("inode {} refers to missing extent {}/{}", i.id, k.partition_id, k.extent_id)));
                    continue;
                };
                let end = k.extent_offset + k.size;
                if end > e.committed {
                    out.push(v("file-content", format!("inode {} reads {}/{} up to {end} beyond committed {}", i.id, k.partition_id, k.extent_id, e.committed)));
                }
                if e.holes.iter().any(|(s, l)| *s < end && k.extent_offset < s + l) {
                    out.push(v("file-content", format!("inode {} refers to punched bytes of {}/{}", i.id, k.partition_id, k.extent_id)));
                }
            }
        }
        self.reachable = reachable;
        self.unreachable = unreachable;
        out
    }

    /// Sum of used bytes over every data partition.
    pub fn used_bytes(&self) -> u64 {
        self.data.iter().map(|d| d.used_bytes).sum()
    }

    pub fn hole_bytes(&self) -> u64 {
        self.data.iter().flat_map(|d| &d.extents).flat_map(|e| &e.holes).map(|(_, l)| l).sum()
    }

    /// Live, deleted and free-listed inode counts plus dentry count.
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        let live = self.meta.iter().flat_map(|m| &m.inodes).filter(|i| !i.is_deleted()).count();
        let deleted = self.meta.iter().flat_map(|m| &m.inodes).filter(|i| i.is_deleted()).count();
        let free = self.meta.iter().map(|m| m.free_list.len()).sum();
        let dentries = self.meta.iter().map(|m| m.dentries.len()).sum();
        (live, deleted, free, dentries)
    }
}

/// The inode an unsettled create produced, if any replica still caches
/// its reply.
fn created_by(sim: &Sim, u: &Unsettled) -> Option<InodeId> {
    sim.nodes().find_map(|(_, n)| match n.sessions(u.partition)?.reply(u.session)? {
        Response::Meta(Ok(MetaReply::Inode(i))) => Some(i.id),
        _ => None,
    })
}
