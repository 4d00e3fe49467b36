//! Durable part of a Raft group: hard state, log entries and the latest
//! snapshot. Kept in memory and optionally mirrored to an append-only file
//! of CRC-framed records.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Entry;
use crate::codec::crc32;
use crate::types::NodeId;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub index: u64,
    pub term: u64,
}

#[derive(Serialize, Deserialize)]
enum Record {
    Entry(Entry),
    Hard { term: u64, vote: Option<NodeId> },
    TruncateFrom(u64),
    Snapshot(SnapshotMeta),
}

#[derive(Debug)]
pub struct LogStore {
    term: u64,
    vote: Option<NodeId>,
    snap: SnapshotMeta,
    snapshot: Option<Vec<u8>>,
    /// Entries `snap.index + 1 ..`.
    entries: Vec<Entry>,
    file: Option<(PathBuf, File)>,
}

impl Default for LogStore {
    fn default() -> Self {
        Self::memory()
    }
}

impl LogStore {
    pub fn memory() -> Self {
        Self { term: 0, vote: None, snap: SnapshotMeta::default(), snapshot: None, entries: Vec::new(), file: None }
    }

    /// Opens (or creates) `<dir>/<name>.raft` plus `<name>.snap`.
    pub fn open(dir: &Path, name: &str) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.raft"));
        let mut s = Self::memory();
        if let Ok(bytes) = std::fs::read(&path) {
            let mut pos = 0;
            while pos + 8 <= bytes.len() {
                let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                if pos + 8 + len > bytes.len() {
                    break;
                }
                let body = &bytes[pos + 4..pos + 4 + len];
                let crc = u32::from_le_bytes(bytes[pos + 4 + len..pos + 8 + len].try_into().unwrap());
                if crc != crc32(body) {
                    // torn tail write
                    break;
                }
                match bincode::deserialize::<Record>(body) {
                    Ok(r) => s.replay(r),
                    Err(_) => break,
                }
                pos += 8 + len;
            }
            let snap_path = dir.join(format!("{name}.snap"));
            if s.snap.index > 0 {
                s.snapshot = Some(std::fs::read(snap_path)?);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        s.file = Some((dir.join(name), file));
        // Rewrite so a torn tail does not linger.
        s.rewrite()?;
        Ok(s)
    }

    fn replay(&mut self, r: Record) {
        match r {
            Record::Entry(e) => {
                if e.index == self.last_index() + 1 {
                    self.entries.push(e);
                }
            }
            Record::Hard { term, vote } => {
                self.term = term;
                self.vote = vote;
            }
            Record::TruncateFrom(i) => self.cut(i),
            Record::Snapshot(m) => {
                self.drop_through(m.index, m.term);
                self.snap = m;
            }
        }
    }

    fn write(&mut self, r: &Record) {
        if let Some((_, f)) = &mut self.file {
            let body = bincode::serialize(r).expect("serialize log record");
            let mut buf = Vec::with_capacity(body.len() + 8);
            buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
            buf.extend_from_slice(&body);
            buf.extend_from_slice(&crc32(&body).to_le_bytes());
            f.write_all(&buf).expect("raft log write");
        }
    }

    fn rewrite(&mut self) -> io::Result<()> {
        let Some((base, _)) = &self.file else { return Ok(()) };
        let base = base.clone();
        let tmp = base.with_extension("raft.tmp");
        let mut out = Vec::new();
        let mut push = |r: &Record| {
            let body = bincode::serialize(r).expect("serialize log record");
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
            out.extend_from_slice(&crc32(&body).to_le_bytes());
        };
        push(&Record::Hard { term: self.term, vote: self.vote });
        if self.snap.index > 0 {
            push(&Record::Snapshot(self.snap.clone()));
        }
        for e in &self.entries {
            push(&Record::Entry(e.clone()));
        }
        std::fs::write(&tmp, &out)?;
        let path = base.with_extension("raft");
        std::fs::rename(&tmp, &path)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        self.file = Some((base, file));
        Ok(())
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn vote(&self) -> Option<NodeId> {
        self.vote
    }

    pub fn set_hard_state(&mut self, term: u64, vote: Option<NodeId>) {
        if term != self.term || vote != self.vote {
            self.term = term;
            self.vote = vote;
            self.write(&Record::Hard { term, vote });
        }
    }

    pub fn snapshot_meta(&self) -> &SnapshotMeta {
        &self.snap
    }

    pub fn snapshot(&self) -> Option<&[u8]> {
        self.snapshot.as_deref()
    }

    pub fn first_index(&self) -> u64 {
        self.snap.index + 1
    }

    pub fn last_index(&self) -> u64 {
        self.snap.index + self.entries.len() as u64
    }

    pub fn last_term(&self) -> u64 {
        self.entries.last().map_or(self.snap.term, |e| e.term)
    }

    /// Term of entry `i`, if it is still known.
    pub fn term_at(&self, i: u64) -> Option<u64> {
        if i == self.snap.index {
            return Some(self.snap.term);
        }
        self.entry(i).map(|e| e.term)
    }

    pub fn entry(&self, i: u64) -> Option<&Entry> {
        if i <= self.snap.index {
            return None;
        }
        self.entries.get((i - self.snap.index - 1) as usize)
    }

    /// Entries from `from` on, stopping after `max_bytes` of payload (at
    /// least one entry is returned when available).
    pub fn slice(&self, from: u64, max_bytes: usize) -> Vec<Entry> {
        let mut out = Vec::new();
        let mut bytes = 0;
        let mut i = from;
        while let Some(e) = self.entry(i) {
            if !out.is_empty() && bytes + e.data.len() > max_bytes {
                break;
            }
            bytes += e.data.len();
            out.push(e.clone());
            i += 1;
        }
        out
    }

    pub fn append(&mut self, e: Entry) {
        debug_assert_eq!(e.index, self.last_index() + 1);
        self.write(&Record::Entry(e.clone()));
        self.entries.push(e);
    }

    fn cut(&mut self, from: u64) {
        if from <= self.snap.index {
            self.entries.clear();
        } else {
            self.entries.truncate((from - self.snap.index - 1) as usize);
        }
    }

    /// Drops entries `from..`.
    pub fn truncate_from(&mut self, from: u64) {
        if from <= self.last_index() {
            self.cut(from);
            self.write(&Record::TruncateFrom(from));
        }
    }

    fn drop_through(&mut self, index: u64, term: u64) {
        if self.term_at(index) == Some(term) && index <= self.last_index() {
            let n = (index - self.snap.index) as usize;
            self.entries.drain(..n);
        } else {
            self.entries.clear();
        }
    }

    /// Installs a snapshot covering everything through `meta.index`. Log
    /// entries after it are kept when they agree with it.
    pub fn install_snapshot(&mut self, meta: SnapshotMeta, data: Vec<u8>) {
        if meta.index <= self.snap.index {
            return;
        }
        self.drop_through(meta.index, meta.term);
        self.snap = meta;
        if let Some((base, _)) = &self.file {
            let path = base.with_extension("snap");
            std::fs::write(&path, &data).expect("snapshot write");
        }
        self.snapshot = Some(data);
        if self.file.is_some() {
            self.rewrite().expect("raft log rewrite");
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(term: u64, index: u64) -> Entry {
        Entry::new(term, index, vec![index as u8; 3])
    }

    #[test]
    fn append_truncate_snapshot() {
        let mut s = LogStore::memory();
        for i in 1..=10 {
            s.append(e(1, i));
        }
        s.truncate_from(8);
        assert_eq!(s.last_index(), 7);
        s.install_snapshot(SnapshotMeta { index: 5, term: 1 }, b"snap".to_vec());
        assert_eq!(s.first_index(), 6);
        assert_eq!(s.term_at(5), Some(1));
        assert_eq!(s.entry(6).unwrap().index, 6);
        assert!(s.entry(5).is_none());
        assert_eq!(s.slice(6, 0).len(), 1);
        assert_eq!(s.slice(6, 1 << 20).len(), 2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = LogStore::open(dir.path(), "g7").unwrap();
            s.set_hard_state(3, Some(NodeId(2)));
            for i in 1..=6 {
                s.append(e(2, i));
            }
            s.truncate_from(5);
            s.append(e(3, 5));
            s.install_snapshot(SnapshotMeta { index: 2, term: 2 }, b"state".to_vec());
            s.append(e(3, 6));
        }
        let s = LogStore::open(dir.path(), "g7").unwrap();
        assert_eq!((s.term(), s.vote()), (3, Some(NodeId(2))));
        assert_eq!(s.snapshot(), Some(&b"state"[..]));
        assert_eq!(s.first_index(), 3);
        assert_eq!(s.last_index(), 6);
        assert_eq!(s.term_at(5), Some(3));
        assert_eq!(s.term_at(4), Some(2));
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = LogStore::open(dir.path(), "g1").unwrap();
            s.append(e(1, 1));
            s.append(e(1, 2));
        }
        let p = dir.path().join("g1.raft");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        let s = LogStore::open(dir.path(), "g1").unwrap();
        assert_eq!(s.last_index(), 1);
    }
}
