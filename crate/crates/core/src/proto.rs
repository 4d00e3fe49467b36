//! Requests, replies and replicated commands exchanged between clients,
//! nodes and the resource manager.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extent::{ExtentError, ExtentImage, ExtentKind};
use crate::meta::{Dentry, Inode, MetaError};
use crate::raft::RaftMsg;
use crate::types::{
    ExtentId, ExtentKey, GroupId, InodeId, InodeType, NodeId, NodeKind, PartitionDescriptor, PartitionId, PartitionStatus,
    Replica, Session,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaOp {
    CreateInode { kind: InodeType, link_target: Vec<u8> },
    CreateRoot,
    CreateDentry { parent: InodeId, name: String, child: InodeId, kind: InodeType },
    DeleteDentry { parent: InodeId, name: String },
    Link { ino: InodeId },
    UnlinkInode { ino: InodeId },
    AdjustDirLinks { ino: InodeId, delta: i32 },
    Evict { ino: InodeId },
    AppendExtentKeys { ino: InodeId, keys: Vec<ExtentKey>, small: Option<bool> },
    ApplySplit { end: InodeId },
    SetStatus { status: PartitionStatus },
    Lookup { parent: InodeId, name: String },
    ReadDir { parent: InodeId },
    GetInode { ino: InodeId },
    BatchInodeGet { ids: Vec<InodeId> },
}

impl MetaOp {
    pub fn is_read(&self) -> bool {
        matches!(self, MetaOp::Lookup { .. } | MetaOp::ReadDir { .. } | MetaOp::GetInode { .. } | MetaOp::BatchInodeGet { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaReply {
    Inode(Inode),
    Nlink(u32),
    Dentry(Dentry),
    Dentries(Vec<Dentry>),
    Inodes { found: Vec<Inode>, missing: Vec<InodeId> },
    Displaced(Vec<ExtentKey>),
    Done,
}

/// Replicated data-partition mutations (the Raft side of the partition).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataOp {
    Overwrite { extent: ExtentId, offset: u64, data: Vec<u8> },
    /// Frees a deleted file's bytes: punch for aggregates, drop otherwise.
    DeleteContent { extent: ExtentId, offset: u64, len: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataReply {
    Appended { key: ExtentKey, committed: u64 },
    Bytes(Vec<u8>),
    Done,
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataError {
    #[error(transparent)]
    Extent(#[from] ExtentError),
    /// The chain did not acknowledge in time. `committed` is the extent's
    /// committed offset, `offset` where this packet landed.
    #[error("replica timeout on extent {extent} (packet at {offset}, committed {committed})")]
    ReplicaTimeout { extent: ExtentId, offset: u64, committed: u64 },
    #[error("partition is recovering")]
    Recovering,
    #[error("this replica is not the primary")]
    NotPrimary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    pub addr: String,
    pub capacity: u64,
    pub raft_set: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub spec: NodeSpec,
    pub used: u64,
    pub last_heartbeat: u64,
    pub alive: bool,
    pub decommissioned: bool,
    /// Partitions the node reports hosting.
    pub hosted: Vec<PartitionId>,
}

impl NodeInfo {
    pub fn utilization(&self) -> f64 {
        if self.spec.capacity == 0 {
            1.0
        } else {
            self.used as f64 / self.spec.capacity as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub name: String,
    pub replicas: usize,
    pub meta_partitions: Vec<PartitionId>,
    pub data_partitions: Vec<PartitionId>,
    pub small_file_threshold: u64,
    pub root_ready: bool,
    /// Data partitions added per expansion.
    pub expand_step: usize,
}

/// What a client needs to use a volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeView {
    pub name: String,
    pub meta: Vec<PartitionDescriptor>,
    pub data: Vec<PartitionDescriptor>,
    pub small_file_threshold: u64,
    pub root_ready: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub id: PartitionId,
    pub leader: Option<NodeId>,
    pub is_leader: bool,
    pub status: PartitionStatus,
    pub start: InodeId,
    pub end: InodeId,
    pub max_inode_id: InodeId,
    pub items: u64,
    pub used_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node: NodeId,
    pub used: u64,
    pub partitions: Vec<PartitionReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdminOp {
    GetView { volume: String },
    CreateVolume { name: String, replicas: usize, meta: usize, data: usize, small_file_threshold: Option<u64> },
    VolumeInfo { volume: String },
    ExpandVolume { volume: String, count: Option<usize> },
    AddNode(NodeSpec),
    Decommission { node: NodeId },
    ListNodes,
    ListPartitions { volume: Option<String> },
    SplitPartition { partition: PartitionId },
    MarkReadOnly { partition: PartitionId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdminReply {
    View(VolumeView),
    Volume(VolumeInfo, Vec<PartitionDescriptor>),
    Nodes(Vec<NodeInfo>),
    Partitions(Vec<PartitionDescriptor>),
    Created(Vec<PartitionId>),
    Split { old: PartitionDescriptor, new: PartitionDescriptor },
    Done,
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManagerError {
    #[error("volume exists")]
    VolumeExists,
    #[error("not found")]
    NotFound,
    #[error("not enough eligible nodes ({available} of {needed})")]
    InsufficientNodes { needed: usize, available: usize },
    #[error("node exists")]
    NodeExists,
    #[error("unknown node")]
    UnknownNode,
    #[error("partition is not the volume's sentinel meta partition")]
    NotSentinelPartition,
    #[error("reported maxInodeID {max_inode_id} exceeds proposed end {end}")]
    StaleMaxInodeId { end: InodeId, max_inode_id: InodeId },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("request timed out inside the manager")]
    Timeout,
}

/// Replicated resource-manager commands.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManagerCmd {
    Admin(AdminOp),
    Report { now: u64, report: NodeReport },
    Liveness { now: u64 },
    Split { partition: PartitionId, end: InodeId },
    SetStatus { partition: PartitionId, status: PartitionStatus },
    RootReady { volume: String },
}

/// Payload of one replicated log entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub session: Option<Session>,
    /// Lowest sequence number the client still waits on; cached replies
    /// below it are dropped.
    pub ack_below: u64,
    /// Leader clock when proposed, so timestamps apply identically.
    pub now: u64,
    pub body: CommandBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommandBody {
    Meta(MetaOp),
    Data(DataOp),
    Manager(ManagerCmd),
    /// Settles an ambiguous request: returns its reply if it was applied,
    /// otherwise guarantees it never will be.
    Resolve { seq: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    Meta { partition: PartitionId, session: Option<Session>, ack_below: u64, op: MetaOp },
    /// Primary-backup append, sent to replica 0.
    Append { partition: PartitionId, extent: Option<ExtentId>, small: bool, data: Vec<u8> },
    Data { partition: PartitionId, session: Option<Session>, ack_below: u64, op: DataOp },
    Read { partition: PartitionId, extent: ExtentId, offset: u64, len: u64 },
    Resolve { partition: PartitionId, session: Session },
    Admin { session: Option<Session>, op: AdminOp },
    Discover,
}

impl Request {
    pub fn partition(&self) -> Option<PartitionId> {
        match self {
            Request::Meta { partition, .. }
            | Request::Append { partition, .. }
            | Request::Data { partition, .. }
            | Request::Read { partition, .. }
            | Request::Resolve { partition, .. } => Some(*partition),
            Request::Admin { .. } | Request::Discover => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Meta(Result<MetaReply, MetaError>),
    Data(Result<DataReply, DataError>),
    Admin(Result<AdminReply, ManagerError>),
    /// `None` means the request was never applied and never will be.
    Resolved(Option<Box<Response>>),
    NotLeader { hint: Option<NodeId> },
    /// The request's sequence number was fenced off by a resolve.
    Fenced,
    /// This node does not host the partition (stale view).
    NoSuchPartition,
    Managers(Vec<Replica>),
    Busy(String),
}

/// Everything that travels between endpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Raft { group: GroupId, msg: RaftMsg },
    /// One per node pair per interval: `leading` lists (group, term,
    /// commit) for groups the sender leads, `following` lists (group, term,
    /// matched) for groups whose leader is the receiver.
    Heartbeat { leading: Vec<(GroupId, u64, u64)>, following: Vec<(GroupId, u64, u64)> },
    Request { rid: u64, req: Request },
    Response { rid: u64, resp: Response },
    PbForward { partition: PartitionId, extent: ExtentId, kind: ExtentKind, offset: u64, data: Vec<u8>, seq: u64 },
    PbAck { partition: PartitionId, extent: ExtentId, end: u64, seq: u64, ok: bool },
    AlignRequest { partition: PartitionId, have: BTreeMap<ExtentId, u64> },
    AlignResponse { partition: PartitionId, images: Option<Vec<ExtentImage>> },
    Report(NodeReport),
    CreatePartition(PartitionDescriptor),
    SetPartitionStatus { partition: PartitionId, status: PartitionStatus },
    /// First frame on a node-to-node TCP connection.
    Hello { node: NodeId },
}
