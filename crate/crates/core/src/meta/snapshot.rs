//! Meta partition snapshot format (little-endian):
//!
//! ```text
//! "CFSMETA1" | version u32 | partitionId u64 | rangeStart u64 | rangeEnd u64
//! | maxInodeID u64 | inodeCount u64 | inode records | dentryCount u64
//! | dentry records | CRC32
//! ```
//!
//! Records are u32-length-prefixed. An inode record holds
//! `id u64 | type u8 | nlink u32 | flag u32 | size u64 | ctime u64 | mtime u64
//! | targetLen u32 | target | keyCount u32 | keys (5 x u64 each)`; a dentry
//! record holds `parent u64 | child u64 | type u8 | nameLen u32 | name`.

use std::collections::{BTreeMap, BTreeSet};

use super::{Dentry, IdAllocator, Inode, MetaError, MetaPartition, DEFAULT_ITEM_LIMIT};
use crate::codec::{ByteReader, ByteWriter, DecodeError};
use crate::types::{ExtentKey, InodeType, PartitionStatus};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"CFSMETA1";
pub const SNAPSHOT_VERSION: u32 = 1;

impl From<DecodeError> for MetaError {
    fn from(e: DecodeError) -> Self {
        MetaError::CorruptSnapshot(e.to_string())
    }
}

impl MetaPartition {
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(64 + self.inodes.len() * 64 + self.dentries.len() * 40);
        w.put_bytes(SNAPSHOT_MAGIC);
        w.put_u32(SNAPSHOT_VERSION);
        w.put_u64(self.id);
        w.put_u64(self.start);
        w.put_u64(self.end);
        w.put_u64(self.max_inode_id);
        w.put_u64(self.inodes.len() as u64);
        for i in self.inodes.values() {
            w.put_record(|w| {
                w.put_u64(i.id);
                w.put_u8(i.kind.to_u8());
                w.put_u32(i.nlink);
                w.put_u32(i.flag);
                w.put_u64(i.size);
                w.put_u64(i.create_time);
                w.put_u64(i.modify_time);
                w.put_u32(i.link_target.len() as u32);
                w.put_bytes(&i.link_target);
                w.put_u32(i.extents.len() as u32);
                for k in &i.extents {
                    w.put_u64(k.partition_id);
                    w.put_u64(k.extent_id);
                    w.put_u64(k.extent_offset);
                    w.put_u64(k.size);
                    w.put_u64(k.file_offset);
                }
            });
        }
        w.put_u64(self.dentries.len() as u64);
        for d in self.dentries.values() {
            w.put_record(|w| {
                w.put_u64(d.parent);
                w.put_u64(d.child);
                w.put_u8(d.kind.to_u8());
                w.put_u32(d.name.len() as u32);
                w.put_bytes(d.name.as_bytes());
            });
        }
        w.seal()
    }

    /// Rebuilds a partition from [`MetaPartition::snapshot`] output. The
    /// volume name and status are not part of the format.
    pub fn restore(bytes: &[u8]) -> Result<MetaPartition, MetaError> {
        let mut r = ByteReader::unseal(bytes)?;
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let version = r.get_u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(DecodeError::Version(version).into());
        }
        let id = r.get_u64()?;
        let start = r.get_u64()?;
        let end = r.get_u64()?;
        let max_inode_id = r.get_u64()?;
        let inode_count = r.get_u64()?;
        let mut inodes = BTreeMap::new();
        let mut free_list = BTreeSet::new();
        for _ in 0..inode_count {
            let mut rec = r.get_record()?;
            let ino = rec.get_u64()?;
            let kind = InodeType::from_u8(rec.get_u8()?).ok_or(DecodeError::Malformed("inode type"))?;
            let nlink = rec.get_u32()?;
            let flag = rec.get_u32()?;
            let size = rec.get_u64()?;
            let create_time = rec.get_u64()?;
            let modify_time = rec.get_u64()?;
            let tlen = rec.get_u32()? as usize;
            let link_target = rec.take(tlen)?.to_vec();
            let kcount = rec.get_u32()? as usize;
            let mut extents = Vec::with_capacity(kcount);
            for _ in 0..kcount {
                extents.push(ExtentKey {
                    partition_id: rec.get_u64()?,
                    extent_id: rec.get_u64()?,
                    extent_offset: rec.get_u64()?,
                    size: rec.get_u64()?,
                    file_offset: rec.get_u64()?,
                });
            }
            let inode = Inode { id: ino, kind, link_target, nlink, flag, size, extents, create_time, modify_time };
            if inode.is_deleted() {
                free_list.insert(ino);
            }
            if inodes.insert(ino, inode).is_some() {
                return Err(DecodeError::Malformed("duplicate inode").into());
            }
        }
        let dentry_count = r.get_u64()?;
        let mut dentries = BTreeMap::new();
        for _ in 0..dentry_count {
            let mut rec = r.get_record()?;
            let parent = rec.get_u64()?;
            let child = rec.get_u64()?;
            let kind = InodeType::from_u8(rec.get_u8()?).ok_or(DecodeError::Malformed("dentry type"))?;
            let nlen = rec.get_u32()? as usize;
            let name = String::from_utf8(rec.take(nlen)?.to_vec()).map_err(|_| DecodeError::Malformed("dentry name"))?;
            dentries.insert((parent, name.clone()), Dentry { parent, name, child, kind });
        }
        if !r.is_empty() {
            return Err(DecodeError::Malformed("trailing bytes").into());
        }
        let alloc = IdAllocator::from_used(start, end, inodes.keys().copied());
        Ok(MetaPartition {
            id,
            volume: String::new(),
            start,
            end,
            inodes,
            dentries,
            max_inode_id,
            free_list,
            alloc,
            status: PartitionStatus::ReadWrite,
            item_limit: DEFAULT_ITEM_LIMIT,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MAX_INODE_ID;
    use rand::{Rng, SeedableRng};

    fn same_structure(a: &MetaPartition, b: &MetaPartition) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.range(), b.range());
        assert_eq!(a.max_inode_id(), b.max_inode_id());
        assert_eq!(a.inodes, b.inodes);
        assert_eq!(a.dentries, b.dentries);
        assert_eq!(a.free_list, b.free_list);
        assert_eq!(a.alloc, b.alloc);
    }

    #[test]
    fn empty_round_trip() {
        let p = MetaPartition::new(3, "", 1, MAX_INODE_ID);
        let q = MetaPartition::restore(&p.snapshot()).unwrap();
        same_structure(&p, &q);
    }

    #[test]
    fn header_layout_is_fixed() {
        let p = MetaPartition::new(0x0102, "", 5, 9);
        let s = p.snapshot();
        assert_eq!(&s[..8], b"CFSMETA1");
        assert_eq!(u32::from_le_bytes(s[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(s[12..20].try_into().unwrap()), 0x0102);
        assert_eq!(u64::from_le_bytes(s[20..28].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(s[28..36].try_into().unwrap()), 9);
        assert_eq!(u64::from_le_bytes(s[36..44].try_into().unwrap()), 4);
        // inodeCount, dentryCount, CRC
        assert_eq!(s.len(), 44 + 8 + 8 + 4);
    }

    #[test]
    fn round_trip_after_random_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut p = MetaPartition::new(7, "", 1, MAX_INODE_ID);
        p.create_root(0).unwrap();
        let mut dirs = vec![1u64];
        let mut files: Vec<u64> = Vec::new();
        for step in 0..500u64 {
            match rng.gen_range(0..6) {
                0 | 1 => {
                    let kind = if rng.gen_bool(0.3) { InodeType::Directory } else { InodeType::File };
                    let i = p.create_inode(kind, vec![], step).unwrap();
                    let parent = dirs[rng.gen_range(0..dirs.len())];
                    p.create_dentry(parent, &format!("n{step}"), i.id, kind, step).unwrap();
                    if kind == InodeType::Directory { dirs.push(i.id) } else { files.push(i.id) }
                }
                2 if !files.is_empty() => {
                    let f = files[rng.gen_range(0..files.len())];
                    let _ = p.link(f, step);
                }
                3 if !files.is_empty() => {
                    let f = files.swap_remove(rng.gen_range(0..files.len()));
                    let _ = p.unlink_inode(f, step);
                }
                4 => {
                    let f = *p.free_list().iter().next().unwrap_or(&0);
                    let _ = p.evict_inode(f);
                }
                _ if !files.is_empty() => {
                    let f = files[rng.gen_range(0..files.len())];
                    let k = ExtentKey { partition_id: 2, extent_id: step, extent_offset: 0, size: rng.gen_range(1..5000), file_offset: 0 };
                    let _ = p.append_extent_keys(f, &[k], None, step);
                }
                _ => {}
            }
        }
        p.check_invariants().unwrap();
        let q = MetaPartition::restore(&p.snapshot()).unwrap();
        same_structure(&p, &q);
        q.check_invariants().unwrap();
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut p = MetaPartition::new(1, "", 1, 50);
        p.create_root(0).unwrap();
        let f = p.create_inode(InodeType::File, b"x".to_vec(), 0).unwrap();
        p.create_dentry(1, "f", f.id, InodeType::File, 0).unwrap();
        let s = p.snapshot();
        for i in 0..s.len() {
            let mut bad = s.clone();
            bad[i] ^= 1;
            assert!(matches!(MetaPartition::restore(&bad), Err(MetaError::CorruptSnapshot(_))), "byte {i}");
        }
    }
}
