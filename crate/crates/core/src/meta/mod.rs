//! In-memory metadata partitions: an inode tree and a dentry tree for one
//! inode-id range of a volume.

mod alloc;
mod partition;
mod snapshot;

pub use alloc::IdAllocator;
pub use partition::{MetaPartition, DEFAULT_ITEM_LIMIT};
pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ExtentKey, InodeId, InodeType};

pub const FLAG_MARKED_DELETED: u32 = 1;
/// Content lives in a small-file aggregate extent.
pub const FLAG_SMALL_FILE: u32 = 1 << 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inode {
    pub id: InodeId,
    pub kind: InodeType,
    pub link_target: Vec<u8>,
    pub nlink: u32,
    pub flag: u32,
    pub size: u64,
    pub extents: Vec<ExtentKey>,
    pub create_time: u64,
    pub modify_time: u64,
}

impl Inode {
    pub fn new(id: InodeId, kind: InodeType, link_target: Vec<u8>, now: u64) -> Self {
        let nlink = if kind == InodeType::Directory { 2 } else { 1 };
        let size = if kind == InodeType::Symlink { link_target.len() as u64 } else { 0 };
        Self { id, kind, link_target, nlink, flag: 0, size, extents: Vec::new(), create_time: now, modify_time: now }
    }

    pub fn is_deleted(&self) -> bool {
        self.flag & FLAG_MARKED_DELETED != 0
    }

    pub fn is_small(&self) -> bool {
        self.flag & FLAG_SMALL_FILE != 0
    }

    pub fn is_dir(&self) -> bool {
        self.kind == InodeType::Directory
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dentry {
    pub parent: InodeId,
    pub name: String,
    pub child: InodeId,
    pub kind: InodeType,
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaError {
    #[error("partition is read-only")]
    PartitionReadOnly,
    #[error("inode range exhausted")]
    RangeExhausted,
    #[error("dentry already exists")]
    DentryExists,
    #[error("not found")]
    NotFound,
    #[error("not a directory")]
    NotDirectory,
    #[error("is a directory")]
    IsDirectory,
    #[error("directory not empty")]
    DirectoryNotEmpty,
    #[error("inode is not on the free list")]
    NotEvictable,
    #[error("partition already split")]
    AlreadySplit,
    #[error("split end {end} is below max inode id {max_inode_id}")]
    EndBelowMaxInode { end: InodeId, max_inode_id: InodeId },
    #[error("inode {0} is outside this partition's range")]
    OutOfRange(InodeId),
    #[error("invalid name")]
    InvalidName,
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

pub fn validate_name(name: &str) -> Result<(), MetaError> {
    if name.is_empty() || name.contains('/') || name == "." || name == ".." || name.contains('\0') {
        return Err(MetaError::InvalidName);
    }
    Ok(())
}
