//! Identifiers and small value types shared by every subsystem.

use std::fmt;

use serde::{Deserialize, Serialize};

pub type InodeId = u64;
pub type PartitionId = u64;
pub type ExtentId = u64;
pub type GroupId = u64;

/// Upper bound of the sentinel meta partition's inode range.
pub const MAX_INODE_ID: InodeId = u64::MAX;

/// The root directory of every volume.
pub const ROOT_INODE: InodeId = 1;

/// Replication group id used by the resource manager replicas.
pub const MANAGER_GROUP: GroupId = 0;

/// Small-file threshold `t` and default packet size (128 KiB).
pub const DEFAULT_SMALL_FILE_THRESHOLD: u64 = 128 * 1024;
pub const DEFAULT_PACKET_SIZE: usize = 128 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Where a message comes from or goes to. Clients are not cluster members and
/// are addressed by an opaque connection/session id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Node(NodeId),
    Client(u64),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Node(n) => write!(f, "{n}"),
            Endpoint::Client(c) => write!(f, "c{c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Meta,
    Data,
    Manager,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Meta => "meta",
            NodeKind::Data => "data",
            NodeKind::Manager => "manager",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "meta" | "metanode" | "MetaNode" => Some(NodeKind::Meta),
            "data" | "datanode" | "DataNode" => Some(NodeKind::Data),
            "manager" | "master" | "Manager" => Some(NodeKind::Manager),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartitionKind {
    Meta,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InodeType {
    File,
    Directory,
    Symlink,
}

impl InodeType {
    pub(crate) fn to_u8(self) -> u8 {
        match self {
            InodeType::File => 1,
            InodeType::Directory => 2,
            InodeType::Symlink => 3,
        }
    }

    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(InodeType::File),
            2 => Some(InodeType::Directory),
            3 => Some(InodeType::Symlink),
            _ => None,
        }
    }
}

/// Why a partition stopped accepting new data. Both flavours share the
/// `ReadOnly` status; the reason only matters for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReadOnlyReason {
    /// Item or byte threshold reached.
    Full,
    /// A replica request timed out.
    ReplicaTimeout,
    /// A replica's node stopped heartbeating or was decommissioned.
    ReplicaLost,
    /// Set by an administrator.
    Admin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartitionStatus {
    ReadWrite,
    ReadOnly(ReadOnlyReason),
    Unavailable,
}

impl PartitionStatus {
    pub fn is_writable(self) -> bool {
        matches!(self, PartitionStatus::ReadWrite)
    }
}

impl fmt::Display for PartitionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionStatus::ReadWrite => f.write_str("rw"),
            PartitionStatus::ReadOnly(r) => write!(f, "ro({r:?})"),
            PartitionStatus::Unavailable => f.write_str("unavailable"),
        }
    }
}

/// Pointer from a byte range of a file to the bytes inside an extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtentKey {
    pub partition_id: PartitionId,
    pub extent_id: ExtentId,
    pub extent_offset: u64,
    pub size: u64,
    pub file_offset: u64,
}

impl ExtentKey {
    pub fn file_end(&self) -> u64 {
        self.file_offset + self.size
    }

    /// The part of this key that overlaps `[start, end)` in file space.
    pub fn slice(&self, start: u64, end: u64) -> Option<ExtentKey> {
        let s = start.max(self.file_offset);
        let e = end.min(self.file_end());
        (s < e).then(|| ExtentKey {
            partition_id: self.partition_id,
            extent_id: self.extent_id,
            extent_offset: self.extent_offset + (s - self.file_offset),
            size: e - s,
            file_offset: s,
        })
    }
}

/// A replica of a partition together with the address used to reach it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replica {
    pub node: NodeId,
    pub addr: String,
}

/// Everything a node or client needs to know about one partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionDescriptor {
    pub id: PartitionId,
    pub kind: PartitionKind,
    pub volume: String,
    /// Replication order; index 0 is the primary-backup leader.
    pub replicas: Vec<Replica>,
    pub status: PartitionStatus,
    /// Inode range for meta partitions, inclusive on both ends.
    pub start: InodeId,
    pub end: InodeId,
    /// Last known Raft leader, a hint only.
    pub leader_hint: Option<NodeId>,
}

impl PartitionDescriptor {
    pub fn nodes(&self) -> Vec<NodeId> {
        self.replicas.iter().map(|r| r.node).collect()
    }

    pub fn contains_inode(&self, ino: InodeId) -> bool {
        self.start <= ino && ino <= self.end
    }
}

/// Per-client request identity used for exactly-once application of
/// replicated mutations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub client: u64,
    pub seq: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_clips_to_overlap() {
        let k = ExtentKey { partition_id: 1, extent_id: 2, extent_offset: 100, size: 50, file_offset: 1000 };
        let s = k.slice(1010, 1020).unwrap();
        assert_eq!((s.extent_offset, s.size, s.file_offset), (110, 10, 1010));
        assert!(k.slice(0, 1000).is_none());
        assert!(k.slice(1050, 2000).is_none());
        assert_eq!(k.slice(0, u64::MAX).unwrap(), k);
    }
}
