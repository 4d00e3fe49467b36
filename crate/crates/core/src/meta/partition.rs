use std::collections::{BTreeMap, BTreeSet};
use std::ops::Bound;

use super::{validate_name, Dentry, IdAllocator, Inode, MetaError, FLAG_MARKED_DELETED, FLAG_SMALL_FILE};
use crate::extent_map;
use crate::types::{ExtentKey, InodeId, InodeType, PartitionId, PartitionStatus, ReadOnlyReason, MAX_INODE_ID, ROOT_INODE};

/// Inode plus dentry count at which a partition stops allocating inodes.
pub const DEFAULT_ITEM_LIMIT: u64 = 1_000_000;

/// One replica's copy of a meta partition. Every mutation here is applied in
/// replication-log order, so all methods must be deterministic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaPartition {
    pub id: PartitionId,
    pub volume: String,
    pub(super) start: InodeId,
    pub(super) end: InodeId,
    pub(super) inodes: BTreeMap<InodeId, Inode>,
    pub(super) dentries: BTreeMap<(InodeId, String), Dentry>,
    pub(super) max_inode_id: InodeId,
    pub(super) free_list: BTreeSet<InodeId>,
    pub(super) alloc: IdAllocator,
    pub status: PartitionStatus,
    pub item_limit: u64,
}

impl MetaPartition {
    pub fn new(id: PartitionId, volume: impl Into<String>, start: InodeId, end: InodeId) -> Self {
        Self {
            id,
            volume: volume.into(),
            start,
            end,
            inodes: BTreeMap::new(),
            dentries: BTreeMap::new(),
            max_inode_id: start.saturating_sub(1),
            free_list: BTreeSet::new(),
            alloc: IdAllocator::new(start, end),
            status: PartitionStatus::ReadWrite,
            item_limit: DEFAULT_ITEM_LIMIT,
        }
    }

    pub fn range(&self) -> (InodeId, InodeId) {
        (self.start, self.end)
    }

    pub fn max_inode_id(&self) -> InodeId {
        self.max_inode_id
    }

    pub fn item_count(&self) -> u64 {
        (self.inodes.len() + self.dentries.len()) as u64
    }

    pub fn inode_count(&self) -> usize {
        self.inodes.len()
    }

    pub fn dentry_count(&self) -> usize {
        self.dentries.len()
    }

    pub fn free_list(&self) -> &BTreeSet<InodeId> {
        &self.free_list
    }

    pub fn inodes(&self) -> impl Iterator<Item = &Inode> {
        self.inodes.values()
    }

    /// All dentries in `(parent, name)` order.
    pub fn dentries(&self) -> impl Iterator<Item = &Dentry> {
        self.dentries.values()
    }

    pub fn contains(&self, ino: InodeId) -> bool {
        self.start <= ino && ino <= self.end
    }

    pub fn is_sentinel(&self) -> bool {
        self.end == MAX_INODE_ID
    }

    /// Next id `create_inode` would hand out.
    pub fn next_inode_id(&self) -> Option<InodeId> {
        self.alloc.smallest()
    }

    fn check_range(&self, ino: InodeId) -> Result<(), MetaError> {
        if self.contains(ino) {
            Ok(())
        } else {
            Err(MetaError::OutOfRange(ino))
        }
    }

    fn live(&self, ino: InodeId) -> Result<&Inode, MetaError> {
        self.check_range(ino)?;
        match self.inodes.get(&ino) {
            Some(i) if !i.is_deleted() => Ok(i),
            _ => Err(MetaError::NotFound),
        }
    }

    fn live_mut(&mut self, ino: InodeId) -> Result<&mut Inode, MetaError> {
        self.check_range(ino)?;
        match self.inodes.get_mut(&ino) {
            Some(i) if !i.is_deleted() => Ok(i),
            _ => Err(MetaError::NotFound),
        }
    }

    fn is_full(&self) -> bool {
        self.item_count() >= self.item_limit
    }

    /// Allocates the smallest unused id in range for a new inode.
    pub fn create_inode(&mut self, kind: InodeType, link_target: Vec<u8>, now: u64) -> Result<Inode, MetaError> {
        if self.status == PartitionStatus::ReadWrite && self.is_full() {
            self.status = PartitionStatus::ReadOnly(ReadOnlyReason::Full);
        }
        if !self.status.is_writable() {
            return Err(MetaError::PartitionReadOnly);
        }
        let id = self.alloc.alloc().ok_or(MetaError::RangeExhausted)?;
        let inode = Inode::new(id, kind, link_target, now);
        self.max_inode_id = self.max_inode_id.max(id);
        self.inodes.insert(id, inode.clone());
        Ok(inode)
    }

    /// Creates the volume root (inode 1). Idempotent.
    pub fn create_root(&mut self, now: u64) -> Result<Inode, MetaError> {
        if let Some(root) = self.inodes.get(&ROOT_INODE) {
            return Ok(root.clone());
        }
        self.check_range(ROOT_INODE)?;
        if !self.alloc.take(ROOT_INODE) {
            return Err(MetaError::RangeExhausted);
        }
        let root = Inode::new(ROOT_INODE, InodeType::Directory, Vec::new(), now);
        self.max_inode_id = self.max_inode_id.max(ROOT_INODE);
        self.inodes.insert(ROOT_INODE, root.clone());
        Ok(root)
    }

    pub fn create_dentry(
        &mut self,
        parent: InodeId,
        name: &str,
        child: InodeId,
        kind: InodeType,
        now: u64,
    ) -> Result<(), MetaError> {
        validate_name(name)?;
        if self.status == PartitionStatus::Unavailable {
            return Err(MetaError::PartitionReadOnly);
        }
        let p = self.live(parent)?;
        if !p.is_dir() {
            return Err(MetaError::NotDirectory);
        }
        let key = (parent, name.to_string());
        if self.dentries.contains_key(&key) {
            return Err(MetaError::DentryExists);
        }
        self.dentries.insert(key, Dentry { parent, name: name.to_string(), child, kind });
        self.live_mut(parent)?.modify_time = now;
        Ok(())
    }

    pub fn lookup(&self, parent: InodeId, name: &str) -> Result<Dentry, MetaError> {
        self.check_range(parent)?;
        self.dentries.get(&(parent, name.to_string())).cloned().ok_or(MetaError::NotFound)
    }

    fn children(&self, parent: InodeId) -> impl Iterator<Item = &Dentry> {
        let lo = Bound::Included((parent, String::new()));
        let hi = match parent.checked_add(1) {
            Some(n) => Bound::Excluded((n, String::new())),
            None => Bound::Unbounded,
        };
        self.dentries.range((lo, hi)).map(|(_, d)| d)
    }

    /// Entries of a directory, sorted by name.
    pub fn read_dir(&self, parent: InodeId) -> Result<Vec<Dentry>, MetaError> {
        let p = self.live(parent)?;
        if !p.is_dir() {
            return Err(MetaError::NotDirectory);
        }
        Ok(self.children(parent).cloned().collect())
    }

    pub fn get_inode(&self, ino: InodeId) -> Result<Inode, MetaError> {
        self.check_range(ino)?;
        self.inodes.get(&ino).cloned().ok_or(MetaError::NotFound)
    }

    /// Returns the inodes present here and the ids that are not.
    pub fn batch_inode_get(&self, ids: &[InodeId]) -> (Vec<Inode>, Vec<InodeId>) {
        let mut found = Vec::new();
        let mut missing = Vec::new();
        for &id in ids {
            match self.inodes.get(&id) {
                Some(i) if self.contains(id) => found.push(i.clone()),
                _ => missing.push(id),
            }
        }
        (found, missing)
    }

    pub fn link(&mut self, ino: InodeId, now: u64) -> Result<u32, MetaError> {
        let i = self.live_mut(ino)?;
        if i.is_dir() {
            return Err(MetaError::IsDirectory);
        }
        i.nlink += 1;
        i.modify_time = now;
        Ok(i.nlink)
    }

    /// Drops one link. Files are released at 0 links; directories carry a
    /// single name, so the unlink that removes it releases them (the
    /// threshold of 2 counts only `.` and the name itself).
    pub fn unlink_inode(&mut self, ino: InodeId, now: u64) -> Result<u32, MetaError> {
        let i = self.live_mut(ino)?;
        i.nlink = i.nlink.saturating_sub(1);
        i.modify_time = now;
        let release = match i.kind {
            InodeType::Directory => true,
            InodeType::File | InodeType::Symlink => i.nlink == 0,
        };
        let nlink = i.nlink;
        if release {
            i.flag |= FLAG_MARKED_DELETED;
            self.free_list.insert(ino);
        }
        Ok(nlink)
    }

    /// Adjusts a directory's link count for a child directory being added
    /// or removed. Never releases the directory.
    pub fn adjust_dir_links(&mut self, ino: InodeId, delta: i32, now: u64) -> Result<u32, MetaError> {
        let i = self.live_mut(ino)?;
        if !i.is_dir() {
            return Err(MetaError::NotDirectory);
        }
        i.nlink = if delta >= 0 { i.nlink.saturating_add(delta as u32) } else { i.nlink.saturating_sub(delta.unsigned_abs()).max(2) };
        i.modify_time = now;
        Ok(i.nlink)
    }

    pub fn delete_dentry(&mut self, parent: InodeId, name: &str, now: u64) -> Result<Dentry, MetaError> {
        self.check_range(parent)?;
        let key = (parent, name.to_string());
        let d = self.dentries.get(&key).ok_or(MetaError::NotFound)?;
        if d.kind == InodeType::Directory && self.contains(d.child) && self.children(d.child).next().is_some() {
            return Err(MetaError::DirectoryNotEmpty);
        }
        let d = self.dentries.remove(&key).expect("checked above");
        if let Ok(p) = self.live_mut(parent) {
            p.modify_time = now;
        }
        Ok(d)
    }

    /// Removes a released inode and returns it so its content can be freed.
    pub fn evict_inode(&mut self, ino: InodeId) -> Result<Inode, MetaError> {
        self.check_range(ino)?;
        if !self.inodes.contains_key(&ino) {
            return Err(MetaError::NotFound);
        }
        if !self.free_list.remove(&ino) {
            return Err(MetaError::NotEvictable);
        }
        let inode = self.inodes.remove(&ino).expect("checked above");
        self.alloc.release(ino);
        Ok(inode)
    }

    /// Cuts the sentinel range down to `[start, new_end]`.
    pub fn apply_split(&mut self, new_end: InodeId) -> Result<(), MetaError> {
        if self.end != MAX_INODE_ID {
            return Err(MetaError::AlreadySplit);
        }
        if new_end < self.max_inode_id || new_end < self.start {
            return Err(MetaError::EndBelowMaxInode { end: new_end, max_inode_id: self.max_inode_id });
        }
        self.end = new_end;
        self.alloc.clamp(new_end);
        Ok(())
    }

    /// Merges newly written extent keys into a file. Returns the displaced
    /// fragments; `small` sets or clears the small-file flag.
    pub fn append_extent_keys(
        &mut self,
        ino: InodeId,
        keys: &[ExtentKey],
        small: Option<bool>,
        now: u64,
    ) -> Result<Vec<ExtentKey>, MetaError> {
        let i = self.live_mut(ino)?;
        if i.is_dir() {
            return Err(MetaError::IsDirectory);
        }
        let mut displaced = Vec::new();
        for k in keys {
            displaced.extend(extent_map::insert(&mut i.extents, *k));
        }
        i.size = i.size.max(extent_map::end_offset(&i.extents));
        match small {
            Some(true) => i.flag |= FLAG_SMALL_FILE,
            Some(false) => i.flag &= !FLAG_SMALL_FILE,
            None => {}
        }
        i.modify_time = now;
        Ok(displaced)
    }

    pub fn set_status(&mut self, status: PartitionStatus) {
        self.status = status;
    }

    /// Checks every structural invariant; used by tests and the census.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.max_inode_id > self.end {
            return Err(format!("maxInodeID {} beyond end {}", self.max_inode_id, self.end));
        }
        for (id, i) in &self.inodes {
            if *id != i.id {
                return Err(format!("inode key {id} holds id {}", i.id));
            }
            if !self.contains(*id) {
                return Err(format!("inode {id} outside [{}, {}]", self.start, self.end));
            }
            if *id > self.max_inode_id {
                return Err(format!("inode {id} above maxInodeID {}", self.max_inode_id));
            }
            if self.alloc.is_free(*id) {
                return Err(format!("inode {id} is also marked free"));
            }
            if !extent_map::is_well_formed(&i.extents) {
                return Err(format!("inode {id} has overlapping extent keys"));
            }
            if i.kind == InodeType::File && extent_map::end_offset(&i.extents) > i.size {
                return Err(format!("inode {id} size {} below extent end", i.size));
            }
            if !i.is_deleted() && i.is_dir() && i.nlink < 2 {
                return Err(format!("live directory {id} has nlink {}", i.nlink));
            }
            if i.is_deleted() != self.free_list.contains(id) {
                return Err(format!("inode {id} deletion mark and free list disagree"));
            }
        }
        for f in &self.free_list {
            if !self.inodes.contains_key(f) {
                return Err(format!("free list holds unknown inode {f}"));
            }
        }
        for ((p, n), d) in &self.dentries {
            if *p != d.parent || *n != d.name {
                return Err(format!("dentry key ({p},{n}) mismatches record"));
            }
            if !self.contains(*p) {
                return Err(format!("dentry parent {p} outside range"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn part() -> MetaPartition {
        MetaPartition::new(1, "vol", 1, 100)
    }

    #[test]
    fn first_inode_is_range_start() {
        let mut p = part();
        let i = p.create_inode(InodeType::File, vec![], 0).unwrap();
        assert_eq!((i.id, i.nlink), (1, 1));
        assert_eq!(p.max_inode_id(), 1);
    }

    #[test]
    fn fills_gap_with_directory() {
        let mut p = part();
        for _ in 0..4 {
            p.create_inode(InodeType::File, vec![], 0).unwrap();
        }
        p.unlink_inode(3, 0).unwrap();
        p.evict_inode(3).unwrap();
        // Ids {1,2,4} in use; the brute-force smallest unused is 3.
        let used: BTreeSet<_> = p.inodes().map(|i| i.id).collect();
        let expect = (1..=100).find(|i| !used.contains(i)).unwrap();
        let d = p.create_inode(InodeType::Directory, vec![], 0).unwrap();
        assert_eq!((d.id, d.nlink), (expect, 2));
        assert_eq!(d.id, 3);
        assert_eq!(p.max_inode_id(), 4);
    }

    #[test]
    fn range_exhausted_at_end() {
        let mut p = MetaPartition::new(1, "vol", 10, 12);
        for _ in 0..3 {
            p.create_inode(InodeType::File, vec![], 0).unwrap();
        }
        assert_eq!(p.max_inode_id(), 12);
        assert_eq!(p.create_inode(InodeType::File, vec![], 0), Err(MetaError::RangeExhausted));
    }

    #[test]
    fn dentry_insert_lookup_duplicate() {
        let mut p = part();
        p.create_root(0).unwrap();
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        p.create_dentry(1, "a", f.id, InodeType::File, 0).unwrap();
        assert_eq!(p.lookup(1, "a").unwrap().child, f.id);
        assert_eq!(p.create_dentry(1, "a", f.id, InodeType::File, 0), Err(MetaError::DentryExists));
        assert_eq!(p.create_dentry(1, "x/y", f.id, InodeType::File, 0), Err(MetaError::InvalidName));
        assert_eq!(p.create_dentry(f.id, "z", 1, InodeType::File, 0), Err(MetaError::NotDirectory));
    }

    #[test]
    fn read_dir_sorted_and_scoped() {
        let mut p = part();
        p.create_root(0).unwrap();
        let d = p.create_inode(InodeType::Directory, vec![], 0).unwrap();
        assert!(p.read_dir(d.id).unwrap().is_empty());
        for n in ["b", "a", "c"] {
            let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
            p.create_dentry(d.id, n, f.id, InodeType::File, 0).unwrap();
        }
        let other = p.create_inode(InodeType::File, vec![], 0).unwrap();
        p.create_dentry(1, "zz", other.id, InodeType::File, 0).unwrap();
        let names: Vec<_> = p.read_dir(d.id).unwrap().into_iter().map(|d| d.name).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(p.read_dir(77), Err(MetaError::NotFound));
    }

    #[test]
    fn unlink_thresholds() {
        let mut p = part();
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        p.link(f.id, 0).unwrap();
        assert_eq!(p.unlink_inode(f.id, 0), Ok(1));
        assert!(!p.free_list().contains(&f.id));
        assert_eq!(p.unlink_inode(f.id, 0), Ok(0));
        assert!(p.free_list().contains(&f.id));
        assert!(p.get_inode(f.id).unwrap().is_deleted());

        let d = p.create_inode(InodeType::Directory, vec![], 0).unwrap();
        assert_eq!(d.nlink, 2);
        p.unlink_inode(d.id, 0).unwrap();
        assert!(p.free_list().contains(&d.id));
        p.check_invariants().unwrap();
    }

    #[test]
    fn link_rejects_directories_and_deleted() {
        let mut p = part();
        let d = p.create_inode(InodeType::Directory, vec![], 0).unwrap();
        assert_eq!(p.link(d.id, 0), Err(MetaError::IsDirectory));
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        p.unlink_inode(f.id, 0).unwrap();
        assert_eq!(p.link(f.id, 0), Err(MetaError::NotFound));
        assert_eq!(p.link(99, 0), Err(MetaError::NotFound));
    }

    #[test]
    fn delete_dentry_refuses_non_empty_local_dir() {
        let mut p = part();
        p.create_root(0).unwrap();
        let d = p.create_inode(InodeType::Directory, vec![], 0).unwrap();
        p.create_dentry(1, "d", d.id, InodeType::Directory, 0).unwrap();
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        p.create_dentry(d.id, "f", f.id, InodeType::File, 0).unwrap();
        assert_eq!(p.delete_dentry(1, "d", 0), Err(MetaError::DirectoryNotEmpty));
        assert_eq!(p.delete_dentry(d.id, "f", 0).unwrap().child, f.id);
        assert_eq!(p.delete_dentry(1, "d", 0).unwrap().child, d.id);
        assert_eq!(p.delete_dentry(1, "d", 0), Err(MetaError::NotFound));
    }

    #[test]
    fn evict_requires_free_list() {
        let mut p = part();
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        assert_eq!(p.evict_inode(f.id), Err(MetaError::NotEvictable));
        p.unlink_inode(f.id, 0).unwrap();
        assert_eq!(p.evict_inode(f.id).unwrap().id, f.id);
        assert_eq!(p.evict_inode(f.id), Err(MetaError::NotFound));
        assert_eq!(p.create_inode(InodeType::File, vec![], 0).unwrap().id, f.id);
    }

    #[test]
    fn split_clamps_allocation() {
        let mut p = MetaPartition::new(1, "vol", 1, MAX_INODE_ID);
        for _ in 0..1000 {
            p.create_inode(InodeType::File, vec![], 0).unwrap();
        }
        assert_eq!(p.apply_split(999), Err(MetaError::EndBelowMaxInode { end: 999, max_inode_id: 1000 }));
        p.apply_split(1000 + 16384).unwrap();
        assert_eq!(p.range(), (1, 17384));
        assert_eq!(p.apply_split(20000), Err(MetaError::AlreadySplit));
        let mut last = 0;
        while let Ok(i) = p.create_inode(InodeType::File, vec![], 0) {
            last = i.id;
        }
        assert_eq!(last, 17384);
        assert_eq!(p.create_inode(InodeType::File, vec![], 0), Err(MetaError::RangeExhausted));
        p.check_invariants().unwrap();

        let mut fresh = MetaPartition::new(2, "vol", 17385, MAX_INODE_ID);
        assert_eq!(fresh.create_inode(InodeType::File, vec![], 0).unwrap().id, 17385);
    }

    #[test]
    fn full_partition_turns_read_only_but_accepts_modifications() {
        let mut p = part();
        p.item_limit = 3;
        p.create_root(0).unwrap();
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        p.create_dentry(1, "f", f.id, InodeType::File, 0).unwrap();
        assert_eq!(p.create_inode(InodeType::File, vec![], 0), Err(MetaError::PartitionReadOnly));
        assert_eq!(p.status, PartitionStatus::ReadOnly(ReadOnlyReason::Full));
        p.create_dentry(1, "g", f.id, InodeType::File, 0).unwrap();
        p.link(f.id, 0).unwrap();
        p.delete_dentry(1, "g", 0).unwrap();
    }

    #[test]
    fn extent_keys_extend_size() {
        let mut p = part();
        let f = p.create_inode(InodeType::File, vec![], 0).unwrap();
        let k = ExtentKey { partition_id: 9, extent_id: 1, extent_offset: 0, size: 100, file_offset: 0 };
        p.append_extent_keys(f.id, &[k], Some(true), 5).unwrap();
        let i = p.get_inode(f.id).unwrap();
        assert_eq!((i.size, i.is_small(), i.modify_time), (100, true, 5));
        let k2 = ExtentKey { partition_id: 9, extent_id: 2, extent_offset: 0, size: 150, file_offset: 0 };
        let displaced = p.append_extent_keys(f.id, &[k2], Some(false), 6).unwrap();
        assert_eq!(displaced, vec![k]);
        assert_eq!(p.get_inode(f.id).unwrap().size, 150);
    }
}
