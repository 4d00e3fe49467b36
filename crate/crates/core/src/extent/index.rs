//! Sidecar index stored next to each file-backed extent (little-endian):
//!
//! ```text
//! "CFSEXT01" | version u32 | partitionId u64 | extentId u64 | kind u8
//! | committed u64 | localSize u64 | holeCount u32 | (offset u64, len u64)*
//! | crcCount u32 | crc u32* | CRC32
//! ```

use std::path::Path;

use super::{Extent, ExtentError, ExtentKind};
use crate::codec::{ByteReader, ByteWriter};
use crate::types::{ExtentId, PartitionId};

pub const INDEX_MAGIC: &[u8; 8] = b"CFSEXT01";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, PartialEq, Eq)]
pub(crate) struct IndexFile {
    pub partition_id: PartitionId,
    pub extent_id: ExtentId,
    pub kind: ExtentKind,
    pub committed: u64,
    pub local_size: u64,
    pub holes: Vec<(u64, u64)>,
    pub crcs: Vec<u32>,
}

pub(crate) fn encode(partition_id: PartitionId, e: &Extent) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(64 + e.crcs.len() * 4);
    w.put_bytes(INDEX_MAGIC);
    w.put_u32(INDEX_VERSION);
    w.put_u64(partition_id);
    w.put_u64(e.id);
    w.put_u8(match e.kind {
        ExtentKind::Normal => 0,
        ExtentKind::SmallFileAggregate => 1,
    });
    w.put_u64(e.committed);
    w.put_u64(e.local_size());
    let holes = e.holes();
    w.put_u32(holes.len() as u32);
    for (s, l) in holes {
        w.put_u64(s);
        w.put_u64(l);
    }
    w.put_u32(e.crcs.len() as u32);
    for c in &e.crcs {
        w.put_u32(*c);
    }
    w.seal()
}

pub(crate) fn decode(bytes: &[u8]) -> Result<IndexFile, ExtentError> {
    let bad = |e: crate::codec::DecodeError| ExtentError::CorruptIndex(e.to_string());
    let mut r = ByteReader::unseal(bytes).map_err(bad)?;
    r.expect_magic(INDEX_MAGIC).map_err(bad)?;
    let version = r.get_u32().map_err(bad)?;
    if version != INDEX_VERSION {
        return Err(ExtentError::CorruptIndex(format!("version {version}")));
    }
    let partition_id = r.get_u64().map_err(bad)?;
    let extent_id = r.get_u64().map_err(bad)?;
    let kind = match r.get_u8().map_err(bad)? {
        0 => ExtentKind::Normal,
        1 => ExtentKind::SmallFileAggregate,
        k => return Err(ExtentError::CorruptIndex(format!("extent kind {k}"))),
    };
    let committed = r.get_u64().map_err(bad)?;
    let local_size = r.get_u64().map_err(bad)?;
    let n = r.get_u32().map_err(bad)?;
    let mut holes = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        holes.push((r.get_u64().map_err(bad)?, r.get_u64().map_err(bad)?));
    }
    let n = r.get_u32().map_err(bad)?;
    let mut crcs = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        crcs.push(r.get_u32().map_err(bad)?);
    }
    if !r.is_empty() {
        return Err(ExtentError::CorruptIndex("trailing bytes".into()));
    }
    Ok(IndexFile { partition_id, extent_id, kind, committed, local_size, holes, crcs })
}

pub(crate) fn write(path: &Path, partition_id: PartitionId, e: &Extent) -> Result<(), ExtentError> {
    let tmp = path.with_extension("idx.tmp");
    std::fs::write(&tmp, encode(partition_id, e))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read(path: &Path) -> Result<IndexFile, ExtentError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extent::storage::Storage;

    #[test]
    fn round_trip_and_corruption() {
        let mut e = Extent::new(12, ExtentKind::SmallFileAggregate, Storage::Memory(Vec::new()));
        e.write(0, &vec![5u8; 200_000]).unwrap();
        e.committed = 150_000;
        e.punch(10, 90).unwrap();
        let bytes = encode(3, &e);
        let idx = decode(&bytes).unwrap();
        assert_eq!(idx.partition_id, 3);
        assert_eq!(idx.extent_id, 12);
        assert_eq!(idx.kind, ExtentKind::SmallFileAggregate);
        assert_eq!((idx.committed, idx.local_size), (150_000, 200_000));
        assert_eq!(idx.holes, vec![(10, 90)]);
        assert_eq!(idx.crcs, e.crcs);
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode(&bad).is_err(), "byte {i}");
        }
    }
}
