//! Extent store of a data partition.
//!
//! Large files append into their own `Normal` extents starting at offset 0.
//! Small files share `SmallFileAggregate` extents and are deleted by punching
//! holes. Each extent keeps a CRC32 per 64 KiB block in memory; reads verify
//! every touched block and never return bytes beyond the committed offset.

mod index;
mod partition;
mod storage;

pub use index::{INDEX_MAGIC, INDEX_VERSION};
pub use partition::{DataPartition, ExtentImage, ExtentState, DEFAULT_EXTENT_LIMIT};

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::crc32;
use crate::types::ExtentId;
use storage::Storage;

pub const CRC_BLOCK_SIZE: u64 = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtentKind {
    Normal,
    SmallFileAggregate,
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtentError {
    #[error("partition is read-only")]
    PartitionReadOnly,
    #[error("extent is full")]
    ExtentFull,
    #[error("extent not found")]
    NotFound,
    #[error("range lies outside the committed size")]
    OutOfCommittedRange,
    #[error("range overlaps a punched hole")]
    HoleOverlap,
    #[error("extent is not a small-file aggregate")]
    NotAggregateExtent,
    #[error("invalid range")]
    InvalidRange,
    #[error("read beyond committed offset {committed}")]
    BeyondCommitted { committed: u64 },
    #[error("read touches a punched hole")]
    HoleRead,
    #[error("crc mismatch in extent {extent} block {block}")]
    CrcMismatch { extent: ExtentId, block: u64 },
    #[error("write at {got} leaves a gap after local size {local}")]
    Gap { local: u64, got: u64 },
    #[error("{len} bytes exceeds the small-file threshold {threshold}")]
    TooLargeForSmallFile { len: u64, threshold: u64 },
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt extent index: {0}")]
    CorruptIndex(String),
}

impl From<io::Error> for ExtentError {
    fn from(e: io::Error) -> Self {
        ExtentError::Io(e.to_string())
    }
}

/// One storage unit of a data partition.
#[derive(Debug)]
pub struct Extent {
    pub id: ExtentId,
    pub kind: ExtentKind,
    committed: u64,
    storage: Storage,
    /// Punched ranges, start -> end (exclusive), disjoint.
    holes: BTreeMap<u64, u64>,
    crcs: Vec<u32>,
}

impl Extent {
    fn new(id: ExtentId, kind: ExtentKind, storage: Storage) -> Self {
        let mut e = Self { id, kind, committed: 0, storage, holes: BTreeMap::new(), crcs: Vec::new() };
        let len = e.storage.len();
        if len > 0 {
            // Fresh crc list for pre-existing bytes.
            let _ = e.refresh_crcs(0, len);
        }
        e
    }

    pub fn committed(&self) -> u64 {
        self.committed
    }

    pub fn local_size(&self) -> u64 {
        self.storage.len()
    }

    pub fn holes(&self) -> Vec<(u64, u64)> {
        self.holes.iter().map(|(s, e)| (*s, e - s)).collect()
    }

    pub fn hole_bytes(&self) -> u64 {
        self.holes.iter().map(|(s, e)| e - s).sum()
    }

    /// Bytes this extent occupies: local size minus punched holes.
    pub fn live_bytes(&self) -> u64 {
        self.local_size() - self.hole_bytes()
    }

    pub fn crc_blocks(&self) -> &[u32] {
        &self.crcs
    }

    fn overlaps_hole(&self, start: u64, end: u64) -> bool {
        if let Some((_, &e)) = self.holes.range(..=start).next_back() {
            if e > start {
                return true;
            }
        }
        self.holes.range(start..end).next().is_some()
    }

    /// Bytes in `[start, end)` not yet covered by a hole.
    fn unholed_in(&self, start: u64, end: u64) -> u64 {
        let mut covered = 0;
        for (&s, &e) in &self.holes {
            let lo = s.max(start);
            let hi = e.min(end);
            if lo < hi {
                covered += hi - lo;
            }
        }
        (end - start) - covered
    }

    fn block_range(start: u64, end: u64) -> std::ops::Range<u64> {
        if start >= end {
            return 0..0;
        }
        (start / CRC_BLOCK_SIZE)..end.div_ceil(CRC_BLOCK_SIZE)
    }

    fn block_crc(&self, block: u64) -> io::Result<u32> {
        let start = block * CRC_BLOCK_SIZE;
        let end = (start + CRC_BLOCK_SIZE).min(self.local_size());
        let mut buf = vec![0u8; (end - start) as usize];
        self.storage.read_at(start, &mut buf)?;
        Ok(crc32(&buf))
    }

    /// Recomputes the CRC of every block overlapping `[start, end)` and
    /// resizes the list to the current local size.
    fn refresh_crcs(&mut self, start: u64, end: u64) -> io::Result<()> {
        let blocks = self.local_size().div_ceil(CRC_BLOCK_SIZE) as usize;
        self.crcs.resize(blocks, 0);
        for b in Self::block_range(start, end.min(self.local_size())) {
            self.crcs[b as usize] = self.block_crc(b)?;
        }
        Ok(())
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), ExtentError> {
        self.storage.write_at(offset, data)?;
        self.refresh_crcs(offset, offset + data.len() as u64)?;
        Ok(())
    }

    fn truncate(&mut self, len: u64) -> Result<(), ExtentError> {
        self.storage.set_len(len)?;
        let stale: Vec<u64> = self.holes.range(len..).map(|(s, _)| *s).collect();
        for s in stale {
            self.holes.remove(&s);
        }
        if let Some((_, e)) = self.holes.iter_mut().next_back() {
            *e = (*e).min(len);
        }
        self.committed = self.committed.min(len);
        let last_block = len.saturating_sub(1) / CRC_BLOCK_SIZE * CRC_BLOCK_SIZE;
        self.refresh_crcs(last_block, len)?;
        Ok(())
    }

    fn punch(&mut self, offset: u64, len: u64) -> Result<u64, ExtentError> {
        let end = offset + len;
        let fresh = self.unholed_in(offset, end);
        let mut s = offset;
        let mut e = end;
        if let Some((&ps, &pe)) = self.holes.range(..=s).next_back() {
            if pe >= s {
                s = ps;
                e = e.max(pe);
            }
        }
        let absorbed: Vec<(u64, u64)> = self.holes.range(s..=e).map(|(a, b)| (*a, *b)).collect();
        for (a, b) in absorbed {
            self.holes.remove(&a);
            e = e.max(b);
        }
        self.holes.insert(s, e);
        self.storage.zero(offset, len)?;
        self.refresh_crcs(offset, end)?;
        Ok(fresh)
    }

    /// Reads `[offset, offset+len)` after verifying the CRC of every block
    /// it touches.
    fn read_verified(&self, offset: u64, len: u64) -> Result<Vec<u8>, ExtentError> {
        let end = offset + len;
        for b in Self::block_range(offset, end) {
            let stored = self.crcs.get(b as usize).copied();
            if stored != Some(self.block_crc(b)?) {
                return Err(ExtentError::CrcMismatch { extent: self.id, block: b });
            }
        }
        let mut buf = vec![0u8; len as usize];
        self.storage.read_at(offset, &mut buf)?;
        Ok(buf)
    }

    fn check_crcs(&self) -> Result<(), String> {
        let blocks = self.local_size().div_ceil(CRC_BLOCK_SIZE);
        if self.crcs.len() as u64 != blocks {
            return Err(format!("extent {} has {} crc blocks, expected {blocks}", self.id, self.crcs.len()));
        }
        for b in 0..blocks {
            let c = self.block_crc(b).map_err(|e| e.to_string())?;
            if c != self.crcs[b as usize] {
                return Err(format!("extent {} block {b} crc stale", self.id));
            }
        }
        Ok(())
    }
}
