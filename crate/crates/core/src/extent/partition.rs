use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::storage::Storage;
use super::{index, Extent, ExtentError, ExtentKind};
use crate::types::{ExtentId, ExtentKey, NodeId, PartitionId, PartitionStatus, DEFAULT_SMALL_FILE_THRESHOLD};

pub const DEFAULT_EXTENT_LIMIT: u64 = 128 * 1024 * 1024;

/// Replica-side summary of one extent, exchanged during recovery.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtentState {
    pub id: ExtentId,
    pub kind: ExtentKind,
    pub committed: u64,
    pub local_size: u64,
    pub holes: Vec<(u64, u64)>,
}

/// Full copy of an extent used for alignment and Raft snapshots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtentImage {
    pub state: ExtentState,
    /// Bytes from `from` up to `state.committed`.
    pub from: u64,
    pub data: Vec<u8>,
}

#[derive(Debug)]
pub struct DataPartition {
    pub id: PartitionId,
    pub volume: String,
    pub replicas: Vec<NodeId>,
    pub status: PartitionStatus,
    pub small_file_threshold: u64,
    pub extent_limit: u64,
    extents: BTreeMap<ExtentId, Extent>,
    next_extent_id: ExtentId,
    small_extent: Option<ExtentId>,
    used_bytes: u64,
    dir: Option<PathBuf>,
}

impl DataPartition {
    pub fn new(id: PartitionId, volume: impl Into<String>, replicas: Vec<NodeId>) -> Self {
        Self {
            id,
            volume: volume.into(),
            replicas,
            status: PartitionStatus::ReadWrite,
            small_file_threshold: DEFAULT_SMALL_FILE_THRESHOLD,
            extent_limit: DEFAULT_EXTENT_LIMIT,
            extents: BTreeMap::new(),
            next_extent_id: 1,
            small_extent: None,
            used_bytes: 0,
            dir: None,
        }
    }

    /// A partition whose extents live as `<pid>_<eid>.ext` files (with
    /// `.idx` sidecars) under `dir`. Existing extents there are loaded.
    pub fn open_dir(id: PartitionId, volume: impl Into<String>, replicas: Vec<NodeId>, dir: &Path) -> Result<Self, ExtentError> {
        std::fs::create_dir_all(dir)?;
        let mut p = Self::new(id, volume, replicas);
        p.dir = Some(dir.to_path_buf());
        let prefix = format!("{id}_");
        let mut names: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.starts_with(&prefix) && n.ends_with(".ext"))
            .collect();
        names.sort();
        for n in names {
            let eid: ExtentId = n[prefix.len()..n.len() - 4]
                .parse()
                .map_err(|_| ExtentError::CorruptIndex(format!("bad extent file name {n}")))?;
            let storage = Storage::open_file(&dir.join(&n))?;
            let idx = index::read(&p.idx_path(eid))?;
            if idx.partition_id != id || idx.extent_id != eid {
                return Err(ExtentError::CorruptIndex(format!("{n}: index names another extent")));
            }
            let mut e = Extent::new(eid, idx.kind, storage);
            if e.local_size() > idx.local_size {
                e.truncate(idx.local_size)?;
            }
            e.committed = idx.committed.min(e.local_size());
            for (s, l) in idx.holes {
                e.holes.insert(s, s + l);
            }
            if e.crcs != idx.crcs {
                return Err(ExtentError::CorruptIndex(format!("{n}: crc blocks disagree with data")));
            }
            if e.kind == ExtentKind::SmallFileAggregate {
                p.small_extent = Some(eid);
            }
            p.next_extent_id = p.next_extent_id.max(eid + 1);
            p.extents.insert(eid, e);
        }
        p.used_bytes = p.recompute_used_bytes();
        Ok(p)
    }

    fn ext_path(&self, eid: ExtentId) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}_{eid}.ext", self.id)))
    }

    fn idx_path(&self, eid: ExtentId) -> PathBuf {
        self.dir.as_ref().expect("file-backed").join(format!("{}_{eid}.idx", self.id))
    }

    fn persist(&self, eid: ExtentId) -> Result<(), ExtentError> {
        if self.dir.is_none() {
            return Ok(());
        }
        if let Some(e) = self.extents.get(&eid) {
            e.storage.sync()?;
            index::write(&self.idx_path(eid), self.id, e)?;
        }
        Ok(())
    }

    fn new_extent(&mut self, eid: ExtentId, kind: ExtentKind) -> Result<(), ExtentError> {
        let storage = match self.ext_path(eid) {
            Some(p) => Storage::create_file(&p)?,
            None => Storage::Memory(Vec::new()),
        };
        self.extents.insert(eid, Extent::new(eid, kind, storage));
        self.next_extent_id = self.next_extent_id.max(eid + 1);
        if kind == ExtentKind::SmallFileAggregate {
            self.small_extent = Some(eid);
        }
        self.persist(eid)
    }

    pub fn extent(&self, eid: ExtentId) -> Option<&Extent> {
        self.extents.get(&eid)
    }

    pub fn extents(&self) -> impl Iterator<Item = &Extent> {
        self.extents.values()
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    /// Brute-force usedBytes: local sizes minus hole lengths.
    pub fn recompute_used_bytes(&self) -> u64 {
        self.extents.values().map(Extent::live_bytes).sum()
    }

    fn key(&self, eid: ExtentId, offset: u64, size: u64) -> ExtentKey {
        ExtentKey { partition_id: self.id, extent_id: eid, extent_offset: offset, size, file_offset: 0 }
    }

    /// Appends `data` at the local end of `extent`, or at offset 0 of a new
    /// extent when `extent` is `None`. The bytes are not committed yet.
    pub fn append(&mut self, extent: Option<ExtentId>, data: &[u8]) -> Result<ExtentKey, ExtentError> {
        if !self.status.is_writable() {
            return Err(ExtentError::PartitionReadOnly);
        }
        let len = data.len() as u64;
        if len > self.extent_limit {
            return Err(ExtentError::ExtentFull);
        }
        let eid = match extent {
            Some(eid) => {
                let e = self.extents.get(&eid).ok_or(ExtentError::NotFound)?;
                if e.kind != ExtentKind::Normal {
                    return Err(ExtentError::InvalidRange);
                }
                if e.local_size() + len > self.extent_limit {
                    return Err(ExtentError::ExtentFull);
                }
                eid
            }
            None => {
                let eid = self.next_extent_id;
                self.new_extent(eid, ExtentKind::Normal)?;
                eid
            }
        };
        let offset = self.extents[&eid].local_size();
        self.write_local(eid, offset, data)?;
        Ok(self.key(eid, offset, len))
    }

    /// Appends a small file into the current aggregate extent, rolling over
    /// to a new one at the extent limit.
    pub fn small_file_write(&mut self, data: &[u8]) -> Result<ExtentKey, ExtentError> {
        if !self.status.is_writable() {
            return Err(ExtentError::PartitionReadOnly);
        }
        let len = data.len() as u64;
        if len > self.small_file_threshold {
            return Err(ExtentError::TooLargeForSmallFile { len, threshold: self.small_file_threshold });
        }
        let eid = match self.small_extent {
            Some(eid) if self.extents.get(&eid).is_some_and(|e| e.local_size() + len <= self.extent_limit) => eid,
            _ => {
                let eid = self.next_extent_id;
                self.new_extent(eid, ExtentKind::SmallFileAggregate)?;
                eid
            }
        };
        let offset = self.extents[&eid].local_size();
        self.write_local(eid, offset, data)?;
        Ok(self.key(eid, offset, len))
    }

    fn write_local(&mut self, eid: ExtentId, offset: u64, data: &[u8]) -> Result<(), ExtentError> {
        let e = self.extents.get_mut(&eid).ok_or(ExtentError::NotFound)?;
        let before = e.live_bytes();
        e.write(offset, data)?;
        let after = e.live_bytes();
        self.used_bytes = self.used_bytes - before + after;
        self.persist(eid)
    }

    /// Backup-side write of a forwarded packet. Uncommitted stale bytes at
    /// or beyond `offset` are discarded first.
    pub fn replicate_write(&mut self, eid: ExtentId, kind: ExtentKind, offset: u64, data: &[u8]) -> Result<(), ExtentError> {
        if !self.extents.contains_key(&eid) {
            self.new_extent(eid, kind)?;
        }
        let e = &self.extents[&eid];
        if offset > e.local_size() {
            return Err(ExtentError::Gap { local: e.local_size(), got: offset });
        }
        if offset < e.committed {
            return Err(ExtentError::InvalidRange);
        }
        if offset < e.local_size() {
            self.truncate_extent(eid, offset)?;
        }
        if offset + data.len() as u64 > self.extent_limit {
            return Err(ExtentError::ExtentFull);
        }
        self.write_local(eid, offset, data)
    }

    fn truncate_extent(&mut self, eid: ExtentId, len: u64) -> Result<(), ExtentError> {
        let e = self.extents.get_mut(&eid).ok_or(ExtentError::NotFound)?;
        let before = e.live_bytes();
        e.truncate(len)?;
        self.used_bytes = self.used_bytes - before + e.live_bytes();
        self.persist(eid)
    }

    /// Raises the committed offset (never lowers it). Returns the new value.
    pub fn commit(&mut self, eid: ExtentId, upto: u64) -> Result<u64, ExtentError> {
        let e = self.extents.get_mut(&eid).ok_or(ExtentError::NotFound)?;
        let target = upto.min(e.local_size());
        if target > e.committed {
            e.committed = target;
            self.persist(eid)?;
        }
        Ok(self.extents[&eid].committed)
    }

    pub fn committed(&self, eid: ExtentId) -> Option<u64> {
        self.extents.get(&eid).map(|e| e.committed)
    }

    /// In-place overwrite of committed, non-punched bytes.
    pub fn overwrite(&mut self, eid: ExtentId, offset: u64, data: &[u8]) -> Result<(), ExtentError> {
        let e = self.extents.get(&eid).ok_or(ExtentError::NotFound)?;
        let end = offset.checked_add(data.len() as u64).ok_or(ExtentError::InvalidRange)?;
        if end > e.committed {
            return Err(ExtentError::OutOfCommittedRange);
        }
        self.apply_overwrite(eid, offset, data)
    }

    /// Replicated form of [`DataPartition::overwrite`]: the leader already
    /// checked the committed range, replicas check only that the bytes are
    /// present locally so the outcome is identical on every replica.
    pub fn apply_overwrite(&mut self, eid: ExtentId, offset: u64, data: &[u8]) -> Result<(), ExtentError> {
        let e = self.extents.get(&eid).ok_or(ExtentError::NotFound)?;
        let end = offset.checked_add(data.len() as u64).ok_or(ExtentError::InvalidRange)?;
        if data.is_empty() || end > e.local_size() {
            return Err(ExtentError::OutOfCommittedRange);
        }
        if e.overlaps_hole(offset, end) {
            return Err(ExtentError::HoleOverlap);
        }
        self.write_local(eid, offset, data)
    }

    pub fn punch_hole(&mut self, eid: ExtentId, offset: u64, len: u64) -> Result<(), ExtentError> {
        let e = self.extents.get_mut(&eid).ok_or(ExtentError::NotFound)?;
        if e.kind != ExtentKind::SmallFileAggregate {
            return Err(ExtentError::NotAggregateExtent);
        }
        if len == 0 || offset.checked_add(len).is_none_or(|end| end > e.local_size()) {
            return Err(ExtentError::InvalidRange);
        }
        let freed = e.punch(offset, len)?;
        self.used_bytes -= freed;
        self.persist(eid)
    }

    pub fn delete_extent(&mut self, eid: ExtentId) -> Result<(), ExtentError> {
        let e = self.extents.remove(&eid).ok_or(ExtentError::NotFound)?;
        self.used_bytes -= e.live_bytes();
        if self.small_extent == Some(eid) {
            self.small_extent = None;
        }
        if let Some(p) = self.ext_path(eid) {
            drop(e);
            let _ = std::fs::remove_file(p);
            let _ = std::fs::remove_file(self.idx_path(eid));
        }
        Ok(())
    }

    /// Frees the bytes of a deleted file: a hole for aggregated small files,
    /// the whole extent otherwise.
    pub fn delete_file_content(&mut self, eid: ExtentId, offset: u64, len: u64) -> Result<(), ExtentError> {
        let e = self.extents.get(&eid).ok_or(ExtentError::NotFound)?;
        match e.kind {
            ExtentKind::SmallFileAggregate => self.punch_hole(eid, offset, len),
            ExtentKind::Normal => self.delete_extent(eid),
        }
    }

    pub fn read(&self, eid: ExtentId, offset: u64, len: u64) -> Result<Vec<u8>, ExtentError> {
        let e = self.extents.get(&eid).ok_or(ExtentError::NotFound)?;
        let end = offset.checked_add(len).ok_or(ExtentError::InvalidRange)?;
        if end > e.committed {
            return Err(ExtentError::BeyondCommitted { committed: e.committed });
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        if e.overlaps_hole(offset, end) {
            return Err(ExtentError::HoleRead);
        }
        e.read_verified(offset, len)
    }

    pub fn extent_states(&self) -> Vec<ExtentState> {
        self.extents
            .values()
            .map(|e| ExtentState { id: e.id, kind: e.kind, committed: e.committed, local_size: e.local_size(), holes: e.holes() })
            .collect()
    }

    /// Copy of every extent's committed bytes from `from[eid]` (0 if absent).
    pub fn export(&self, from: &BTreeMap<ExtentId, u64>) -> Result<Vec<ExtentImage>, ExtentError> {
        let mut out = Vec::new();
        for e in self.extents.values() {
            let start = from.get(&e.id).copied().unwrap_or(0).min(e.committed);
            let mut data = vec![0u8; (e.committed - start) as usize];
            e.storage.read_at(start, &mut data)?;
            out.push(ExtentImage {
                state: ExtentState { id: e.id, kind: e.kind, committed: e.committed, local_size: e.committed, holes: e.holes() },
                from: start,
                data,
            });
        }
        Ok(out)
    }

    /// Aligns this replica to `images`: each extent is cut or extended to
    /// the image's committed size, holes copied, extents absent from the
    /// images removed. Local committed bytes beyond the image are kept.
    pub fn align(&mut self, images: &[ExtentImage]) -> Result<(), ExtentError> {
        let wanted: std::collections::BTreeSet<ExtentId> = images.iter().map(|i| i.state.id).collect();
        let stale: Vec<ExtentId> = self.extents.keys().filter(|id| !wanted.contains(id)).copied().collect();
        for id in stale {
            self.delete_extent(id)?;
        }
        for img in images {
            let st = &img.state;
            if !self.extents.contains_key(&st.id) {
                self.new_extent(st.id, st.kind)?;
            }
            let local = self.extents[&st.id].local_size();
            let own_committed = self.extents[&st.id].committed;
            let target = st.committed.max(own_committed);
            if local > target {
                self.truncate_extent(st.id, target)?;
            }
            let local = self.extents[&st.id].local_size();
            if local < st.committed {
                if img.from > local {
                    return Err(ExtentError::Gap { local, got: img.from });
                }
                let skip = (local - img.from) as usize;
                self.write_local(st.id, local, &img.data[skip..])?;
            }
            {
                let e = self.extents.get_mut(&st.id).unwrap();
                let before = e.live_bytes();
                for &(s, l) in &st.holes {
                    if s + l <= e.local_size() {
                        e.punch(s, l)?;
                    }
                }
                e.committed = target.min(e.local_size());
                let after = e.live_bytes();
                self.used_bytes = self.used_bytes - before + after;
            }
            self.persist(st.id)?;
        }
        Ok(())
    }

    /// Replaces the whole content with `images` (Raft snapshot install).
    pub fn install(&mut self, images: &[ExtentImage]) -> Result<(), ExtentError> {
        let ids: Vec<ExtentId> = self.extents.keys().copied().collect();
        for id in ids {
            self.delete_extent(id)?;
        }
        self.align(images)
    }

    pub fn next_extent_id(&self) -> ExtentId {
        self.next_extent_id
    }

    /// Flips one stored byte without touching its CRC. Fault injection only.
    pub fn corrupt_byte(&mut self, eid: ExtentId, offset: u64) -> Result<(), ExtentError> {
        let e = self.extents.get_mut(&eid).ok_or(ExtentError::NotFound)?;
        if offset >= e.local_size() {
            return Err(ExtentError::InvalidRange);
        }
        let mut b = [0u8];
        e.storage.read_at(offset, &mut b)?;
        b[0] ^= 0xff;
        e.storage.write_at(offset, &b)?;
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for e in self.extents.values() {
            if e.committed > e.local_size() || e.local_size() > self.extent_limit {
                return Err(format!("extent {} sizes committed {} local {}", e.id, e.committed, e.local_size()));
            }
            let mut prev_end = 0;
            for (&s, &end) in &e.holes {
                if s >= end || s < prev_end || end > e.local_size() {
                    return Err(format!("extent {} hole [{s},{end}) malformed", e.id));
                }
                prev_end = end;
            }
            if !e.holes.is_empty() && e.kind != ExtentKind::SmallFileAggregate {
                return Err(format!("normal extent {} has holes", e.id));
            }
            e.check_crcs()?;
        }
        if self.used_bytes != self.recompute_used_bytes() {
            return Err(format!("usedBytes {} != recomputed {}", self.used_bytes, self.recompute_used_bytes()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extent::CRC_BLOCK_SIZE;
    use rand::{Rng, SeedableRng};

    fn dp() -> DataPartition {
        DataPartition::new(4, "vol", vec![NodeId(1), NodeId(2), NodeId(3)])
    }

    fn commit_all(p: &mut DataPartition, eid: ExtentId) {
        let l = p.extent(eid).unwrap().local_size();
        p.commit(eid, l).unwrap();
    }

    #[test]
    fn fresh_append_lands_at_zero() {
        let mut p = dp();
        let k = p.append(None, &vec![7u8; 1 << 20]).unwrap();
        assert_eq!((k.extent_offset, k.size), (0, 1 << 20));
    }

    #[test]
    fn cumulative_offsets() {
        let mut p = dp();
        let a = p.append(None, &[1u8; 131072]).unwrap();
        let b = p.append(Some(a.extent_id), &[2u8; 131072]).unwrap();
        let c = p.append(Some(a.extent_id), &[3u8; 131072]).unwrap();
        assert_eq!([a.extent_offset, b.extent_offset, c.extent_offset], [0, 131072, 262144]);
        p.check_invariants().unwrap();
    }

    #[test]
    fn append_past_limit_is_full() {
        let mut p = dp();
        p.extent_limit = 1000;
        let a = p.append(None, &[0u8; 600]).unwrap();
        assert_eq!(p.append(Some(a.extent_id), &[0u8; 401]), Err(ExtentError::ExtentFull));
        assert!(p.append(Some(a.extent_id), &[0u8; 400]).is_ok());
    }

    #[test]
    fn read_only_rejects_appends() {
        let mut p = dp();
        p.status = PartitionStatus::ReadOnly(crate::types::ReadOnlyReason::Full);
        assert_eq!(p.append(None, b"x"), Err(ExtentError::PartitionReadOnly));
        assert_eq!(p.small_file_write(b"x"), Err(ExtentError::PartitionReadOnly));
    }

    #[test]
    fn overwrite_in_place() {
        let mut p = dp();
        let k = p.append(None, b"0123456789").unwrap();
        commit_all(&mut p, k.extent_id);
        p.overwrite(k.extent_id, 0, b"abcd").unwrap();
        assert_eq!(p.read(k.extent_id, 0, 10).unwrap(), b"abcd456789");
        assert_eq!(p.overwrite(k.extent_id, 8, b"xyz"), Err(ExtentError::OutOfCommittedRange));
        assert_eq!(p.committed(k.extent_id), Some(10));
    }

    #[test]
    fn random_overwrites_match_flat_buffer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut p = dp();
        let len = 3 * CRC_BLOCK_SIZE as usize + 1234;
        let mut model: Vec<u8> = (0..len).map(|i| i as u8).collect();
        let k = p.append(None, &model).unwrap();
        commit_all(&mut p, k.extent_id);
        for _ in 0..200 {
            let off = rng.gen_range(0..len);
            let n = rng.gen_range(1..=(len - off).min(100_000));
            let data: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
            p.overwrite(k.extent_id, off as u64, &data).unwrap();
            model[off..off + n].copy_from_slice(&data);
        }
        assert_eq!(p.read(k.extent_id, 0, len as u64).unwrap(), model);
        p.check_invariants().unwrap();
    }

    #[test]
    fn reads_stop_at_committed() {
        let mut p = dp();
        let k = p.append(None, b"hello world").unwrap();
        p.commit(k.extent_id, 5).unwrap();
        assert_eq!(p.read(k.extent_id, 0, 5).unwrap(), b"hello");
        assert_eq!(p.read(k.extent_id, 0, 6), Err(ExtentError::BeyondCommitted { committed: 5 }));
        // commit never regresses
        assert_eq!(p.commit(k.extent_id, 2).unwrap(), 5);
    }

    #[test]
    fn small_files_share_extent_and_punch() {
        let mut p = dp();
        let a = p.small_file_write(&[1u8; 1000]).unwrap();
        let b = p.small_file_write(&[2u8; 3000]).unwrap();
        assert_eq!(a.extent_id, b.extent_id);
        assert_eq!(b.extent_offset, 1000);
        commit_all(&mut p, a.extent_id);
        assert_eq!(p.used_bytes(), 4000);
        p.punch_hole(a.extent_id, 0, 1000).unwrap();
        assert_eq!(p.used_bytes(), 3000);
        assert_eq!(p.read(a.extent_id, 0, 10), Err(ExtentError::HoleRead));
        assert_eq!(p.read(b.extent_id, 1000, 3000).unwrap(), vec![2u8; 3000]);
        // re-punching is free of double counting
        p.punch_hole(a.extent_id, 500, 1000).unwrap();
        assert_eq!(p.used_bytes(), 2500);
        assert_eq!(p.overwrite(b.extent_id, 1200, b"x"), Err(ExtentError::HoleOverlap));
        p.check_invariants().unwrap();
        assert_eq!(p.extent(a.extent_id).unwrap().holes(), vec![(0, 1500)]);
    }

    #[test]
    fn small_file_threshold_enforced() {
        let mut p = dp();
        p.small_file_threshold = 10;
        assert!(matches!(p.small_file_write(&[0; 11]), Err(ExtentError::TooLargeForSmallFile { .. })));
    }

    #[test]
    fn punch_only_on_aggregates() {
        let mut p = dp();
        let k = p.append(None, &[0u8; 100]).unwrap();
        assert_eq!(p.punch_hole(k.extent_id, 0, 10), Err(ExtentError::NotAggregateExtent));
        let s = p.small_file_write(&[0u8; 100]).unwrap();
        assert_eq!(p.punch_hole(s.extent_id, 50, 51), Err(ExtentError::InvalidRange));
    }

    #[test]
    fn delete_file_content_dispatches_by_kind() {
        let mut p = dp();
        let big = p.append(None, &[1u8; 500]).unwrap();
        let small = p.small_file_write(&[2u8; 70]).unwrap();
        p.delete_file_content(big.extent_id, 0, 500).unwrap();
        assert!(p.extent(big.extent_id).is_none());
        p.delete_file_content(small.extent_id, small.extent_offset, 70).unwrap();
        assert_eq!(p.used_bytes(), 0);
        assert_eq!(p.delete_extent(big.extent_id), Err(ExtentError::NotFound));
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut p = dp();
        let data: Vec<u8> = (0..200_000).map(|_| rng.gen()).collect();
        let k = p.append(None, &data).unwrap();
        commit_all(&mut p, k.extent_id);
        for _ in 0..50 {
            let off = rng.gen_range(0..data.len() as u64);
            p.corrupt_byte(k.extent_id, off).unwrap();
            let block = off / CRC_BLOCK_SIZE;
            let r = p.read(k.extent_id, block * CRC_BLOCK_SIZE, 1);
            assert_eq!(r, Err(ExtentError::CrcMismatch { extent: k.extent_id, block }));
            p.corrupt_byte(k.extent_id, off).unwrap();
        }
        assert_eq!(p.read(k.extent_id, 0, data.len() as u64).unwrap(), data);
    }

    #[test]
    fn replicate_write_discards_stale_tail_and_rejects_gaps() {
        let mut p = dp();
        p.replicate_write(5, ExtentKind::Normal, 0, b"abcdef").unwrap();
        p.commit(5, 3).unwrap();
        p.replicate_write(5, ExtentKind::Normal, 3, b"XY").unwrap();
        assert_eq!(p.extent(5).unwrap().local_size(), 5);
        assert_eq!(p.replicate_write(5, ExtentKind::Normal, 9, b"z"), Err(ExtentError::Gap { local: 5, got: 9 }));
        assert_eq!(p.replicate_write(5, ExtentKind::Normal, 1, b"z"), Err(ExtentError::InvalidRange));
        assert_eq!(p.next_extent_id(), 6);
        p.check_invariants().unwrap();
    }

    #[test]
    fn align_truncates_extends_and_drops() {
        let mut src = dp();
        let a = src.append(None, &[1u8; 100]).unwrap();
        src.commit(a.extent_id, 100).unwrap();
        let s = src.small_file_write(&[2u8; 50]).unwrap();
        src.commit(s.extent_id, 50).unwrap();
        src.punch_hole(s.extent_id, 0, 10).unwrap();

        let mut dst = dp();
        dst.replicate_write(a.extent_id, ExtentKind::Normal, 0, &[1u8; 40]).unwrap();
        dst.replicate_write(99, ExtentKind::Normal, 0, b"gone").unwrap();
        let from: BTreeMap<_, _> = dst.extent_states().iter().map(|s| (s.id, s.committed)).collect();
        dst.align(&src.export(&from).unwrap()).unwrap();
        assert!(dst.extent(99).is_none());
        assert_eq!(dst.read(a.extent_id, 0, 100).unwrap(), vec![1u8; 100]);
        assert_eq!(dst.extent(s.extent_id).unwrap().holes(), vec![(0, 10)]);
        assert_eq!(dst.used_bytes(), src.used_bytes());
        dst.check_invariants().unwrap();

        // stale local tail beyond the group's committed offset is cut
        let mut lag = dp();
        lag.replicate_write(a.extent_id, ExtentKind::Normal, 0, &[1u8; 150]).unwrap();
        lag.align(&src.export(&BTreeMap::new()).unwrap()).unwrap();
        assert_eq!(lag.extent(a.extent_id).unwrap().local_size(), 100);
    }

    #[test]
    fn file_backed_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (k, s) = {
            let mut p = DataPartition::open_dir(8, "vol", vec![NodeId(1)], dir.path()).unwrap();
            let k = p.append(None, &vec![9u8; 100_000]).unwrap();
            p.commit(k.extent_id, 100_000).unwrap();
            let s = p.small_file_write(b"tiny file").unwrap();
            p.commit(s.extent_id, 9).unwrap();
            p.punch_hole(s.extent_id, 0, 4).unwrap();
            p.overwrite(k.extent_id, 10, b"over").unwrap();
            (k, s)
        };
        assert!(dir.path().join(format!("8_{}.ext", k.extent_id)).exists());
        assert!(dir.path().join(format!("8_{}.idx", k.extent_id)).exists());
        let p = DataPartition::open_dir(8, "vol", vec![NodeId(1)], dir.path()).unwrap();
        assert_eq!(p.read(k.extent_id, 8, 8).unwrap(), b"\x09\x09over\x09\x09");
        assert_eq!(p.read(s.extent_id, 4, 5).unwrap(), b" file");
        assert_eq!(p.read(s.extent_id, 0, 2), Err(ExtentError::HoleRead));
        assert_eq!(p.used_bytes(), 100_000 + 5);
        p.check_invariants().unwrap();
    }
}
