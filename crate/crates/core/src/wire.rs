//! The frame shared by the simulator and TCP (little-endian):
//!
//! ```text
//! "CFSMSG01" | msgType u16 | groupId u64 | term u64 | payloadLen u32 | payload | CRC32
//! ```
//!
//! The payload is the bincode encoding of a [`Message`]; the CRC covers
//! everything before it. `msgType` is fine grained (one code per request
//! kind and per metadata operation) so faults and counters can target a
//! single protocol step.

use crate::codec::{crc32, DecodeError};
use crate::proto::{AdminOp, DataOp, Message, MetaOp, Request, Response};
use crate::raft::RaftMsg;

pub const FRAME_MAGIC: &[u8; 8] = b"CFSMSG01";
pub const HEADER_LEN: usize = 8 + 2 + 8 + 8 + 4;
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: usize = 64 << 20;

macro_rules! msg_types {
    ($($name:ident = $code:expr, $text:expr;)*) => {
        pub mod msg_type {
            $(pub const $name: u16 = $code;)*
        }

        /// Printable name of a message type code.
        pub fn type_name(code: u16) -> &'static str {
            match code {
                $($code => $text,)*
                _ => "unknown",
            }
        }

        /// Inverse of [`type_name`].
        pub fn type_code(name: &str) -> Option<u16> {
            match name {
                $($text => Some($code),)*
                _ => None,
            }
        }
    };
}

msg_types! {
    RAFT_PREVOTE = 1, "raft_prevote";
    RAFT_PREVOTE_RESP = 2, "raft_prevote_resp";
    RAFT_VOTE_REQ = 3, "raft_vote_req";
    RAFT_VOTE = 4, "raft_vote";
    RAFT_APPEND = 5, "raft_append";
    RAFT_APPEND_RESP = 6, "raft_append_resp";
    RAFT_SNAPSHOT = 7, "raft_snapshot";
    RAFT_SNAPSHOT_RESP = 8, "raft_snapshot_resp";
    HEARTBEAT = 10, "heartbeat";
    META_CREATE_INODE = 20, "meta_create_inode";
    META_CREATE_ROOT = 21, "meta_create_root";
    META_CREATE_DENTRY = 22, "meta_create_dentry";
    META_DELETE_DENTRY = 23, "meta_delete_dentry";
    META_LINK = 24, "meta_link";
    META_UNLINK_INODE = 25, "meta_unlink_inode";
    META_ADJUST_LINKS = 26, "meta_adjust_links";
    META_EVICT = 27, "meta_evict";
    META_APPEND_KEYS = 28, "meta_append_keys";
    META_APPLY_SPLIT = 29, "meta_apply_split";
    META_SET_STATUS = 30, "meta_set_status";
    META_LOOKUP = 31, "meta_lookup";
    META_READ_DIR = 32, "meta_read_dir";
    META_GET_INODE = 33, "meta_get_inode";
    META_BATCH_GET = 34, "meta_batch_get";
    DATA_APPEND = 40, "data_append";
    DATA_OVERWRITE = 41, "data_overwrite";
    DATA_DELETE = 42, "data_delete";
    DATA_READ = 43, "data_read";
    RESOLVE = 44, "resolve";
    ADMIN_GET_VIEW = 50, "admin_get_view";
    ADMIN_CREATE_VOLUME = 51, "admin_create_volume";
    ADMIN_VOLUME_INFO = 52, "admin_volume_info";
    ADMIN_EXPAND = 53, "admin_expand";
    ADMIN_ADD_NODE = 54, "admin_add_node";
    ADMIN_DECOMMISSION = 55, "admin_decommission";
    ADMIN_LIST_NODES = 56, "admin_list_nodes";
    ADMIN_LIST_PARTITIONS = 57, "admin_list_partitions";
    ADMIN_SPLIT = 58, "admin_split";
    ADMIN_READONLY = 59, "admin_readonly";
    DISCOVER = 60, "discover";
    RESPONSE = 70, "response";
    PB_FORWARD = 80, "pb_forward";
    PB_ACK = 81, "pb_ack";
    ALIGN_REQUEST = 82, "align_request";
    ALIGN_RESPONSE = 83, "align_response";
    NODE_REPORT = 90, "node_report";
    CREATE_PARTITION = 91, "create_partition";
    SET_STATUS = 92, "set_status";
    HELLO = 93, "hello";
}

fn meta_type(op: &MetaOp) -> u16 {
    use msg_type::*;
    match op {
        MetaOp::CreateInode { .. } => META_CREATE_INODE,
        MetaOp::CreateRoot => META_CREATE_ROOT,
        MetaOp::CreateDentry { .. } => META_CREATE_DENTRY,
        MetaOp::DeleteDentry { .. } => META_DELETE_DENTRY,
        MetaOp::Link { .. } => META_LINK,
        MetaOp::UnlinkInode { .. } => META_UNLINK_INODE,
        MetaOp::AdjustDirLinks { .. } => META_ADJUST_LINKS,
        MetaOp::Evict { .. } => META_EVICT,
        MetaOp::AppendExtentKeys { .. } => META_APPEND_KEYS,
        MetaOp::ApplySplit { .. } => META_APPLY_SPLIT,
        MetaOp::SetStatus { .. } => META_SET_STATUS,
        MetaOp::Lookup { .. } => META_LOOKUP,
        MetaOp::ReadDir { .. } => META_READ_DIR,
        MetaOp::GetInode { .. } => META_GET_INODE,
        MetaOp::BatchInodeGet { .. } => META_BATCH_GET,
    }
}

fn admin_type(op: &AdminOp) -> u16 {
    use msg_type::*;
    match op {
        AdminOp::GetView { .. } => ADMIN_GET_VIEW,
        AdminOp::CreateVolume { .. } => ADMIN_CREATE_VOLUME,
        AdminOp::VolumeInfo { .. } => ADMIN_VOLUME_INFO,
        AdminOp::ExpandVolume { .. } => ADMIN_EXPAND,
        AdminOp::AddNode(_) => ADMIN_ADD_NODE,
        AdminOp::Decommission { .. } => ADMIN_DECOMMISSION,
        AdminOp::ListNodes => ADMIN_LIST_NODES,
        AdminOp::ListPartitions { .. } => ADMIN_LIST_PARTITIONS,
        AdminOp::SplitPartition { .. } => ADMIN_SPLIT,
        AdminOp::MarkReadOnly { .. } => ADMIN_READONLY,
    }
}

impl Message {
    pub fn msg_type(&self) -> u16 {
        use msg_type::*;
        match self {
            Message::Raft { msg, .. } => match msg {
                RaftMsg::PreVote { .. } => RAFT_PREVOTE,
                RaftMsg::PreVoteResp { .. } => RAFT_PREVOTE_RESP,
                RaftMsg::RequestVote { .. } => RAFT_VOTE_REQ,
                RaftMsg::Vote { .. } => RAFT_VOTE,
                RaftMsg::Append { .. } => RAFT_APPEND,
                RaftMsg::AppendResp { .. } => RAFT_APPEND_RESP,
                RaftMsg::Snapshot { .. } => RAFT_SNAPSHOT,
                RaftMsg::SnapshotResp { .. } => RAFT_SNAPSHOT_RESP,
            },
            Message::Heartbeat { .. } => HEARTBEAT,
            Message::Request { req, .. } => match req {
                Request::Meta { op, .. } => meta_type(op),
                Request::Append { .. } => DATA_APPEND,
                Request::Data { op: DataOp::Overwrite { .. }, .. } => DATA_OVERWRITE,
                Request::Data { op: DataOp::DeleteContent { .. }, .. } => DATA_DELETE,
                Request::Read { .. } => DATA_READ,
                Request::Resolve { .. } => RESOLVE,
                Request::Admin { op, .. } => admin_type(op),
                Request::Discover => DISCOVER,
            },
            Message::Response { .. } => RESPONSE,
            Message::PbForward { .. } => PB_FORWARD,
            Message::PbAck { .. } => PB_ACK,
            Message::AlignRequest { .. } => ALIGN_REQUEST,
            Message::AlignResponse { .. } => ALIGN_RESPONSE,
            Message::Report(_) => NODE_REPORT,
            Message::CreatePartition(_) => CREATE_PARTITION,
            Message::SetPartitionStatus { .. } => SET_STATUS,
            Message::Hello { .. } => HELLO,
        }
    }

    /// Replication group / partition the message concerns (0 if none).
    pub fn group(&self) -> u64 {
        match self {
            Message::Raft { group, .. } => *group,
            Message::Request { req, .. } => req.partition().unwrap_or(0),
            Message::PbForward { partition, .. }
            | Message::PbAck { partition, .. }
            | Message::AlignRequest { partition, .. }
            | Message::AlignResponse { partition, .. }
            | Message::SetPartitionStatus { partition, .. } => *partition,
            Message::CreatePartition(d) => d.id,
            _ => 0,
        }
    }

    pub fn term(&self) -> u64 {
        match self {
            Message::Raft { msg, .. } => msg.term(),
            _ => 0,
        }
    }

    pub fn type_name(&self) -> &'static str {
        type_name(self.msg_type())
    }
}

impl Response {
    /// Whether a client should try another replica.
    pub fn is_redirect(&self) -> bool {
        matches!(self, Response::NotLeader { .. } | Response::NoSuchPartition | Response::Busy(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: u16,
    pub group: u64,
    pub term: u64,
    pub payload_len: u32,
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let payload = bincode::serialize(msg).expect("message serializes");
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&msg.msg_type().to_le_bytes());
    buf.extend_from_slice(&msg.group().to_le_bytes());
    buf.extend_from_slice(&msg.term().to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&payload);
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_header(buf: &[u8]) -> Result<FrameHeader, DecodeError> {
    if buf.len() < HEADER_LEN {
        return Err(DecodeError::Truncated(HEADER_LEN));
    }
    if &buf[..8] != FRAME_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let h = FrameHeader {
        msg_type: u16::from_le_bytes(buf[8..10].try_into().unwrap()),
        group: u64::from_le_bytes(buf[10..18].try_into().unwrap()),
        term: u64::from_le_bytes(buf[18..26].try_into().unwrap()),
        payload_len: u32::from_le_bytes(buf[26..30].try_into().unwrap()),
    };
    if h.payload_len as usize > MAX_PAYLOAD {
        return Err(DecodeError::Malformed("payload too large"));
    }
    Ok(h)
}

/// Total frame length announced by a header.
pub fn frame_len(h: &FrameHeader) -> usize {
    HEADER_LEN + h.payload_len as usize + 4
}

pub fn decode(buf: &[u8]) -> Result<Message, DecodeError> {
    let h = decode_header(buf)?;
    let total = frame_len(&h);
    if buf.len() != total {
        return Err(DecodeError::Truncated(total));
    }
    let stored = u32::from_le_bytes(buf[total - 4..].try_into().unwrap());
    let computed = crc32(&buf[..total - 4]);
    if stored != computed {
        return Err(DecodeError::Checksum { stored, computed });
    }
    let msg: Message =
        bincode::deserialize(&buf[HEADER_LEN..total - 4]).map_err(|_| DecodeError::Malformed("payload"))?;
    if msg.msg_type() != h.msg_type || msg.group() != h.group || msg.term() != h.term {
        return Err(DecodeError::Malformed("header disagrees with payload"));
    }
    Ok(msg)
}

/// Reads one frame from a byte stream.
pub fn read_frame(r: &mut impl std::io::Read) -> std::io::Result<Message> {
    let mut head = [0u8; HEADER_LEN];
    r.read_exact(&mut head)?;
    let h = decode_header(&head).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut buf = vec![0u8; frame_len(&h)];
    buf[..HEADER_LEN].copy_from_slice(&head);
    r.read_exact(&mut buf[HEADER_LEN..])?;
    decode(&buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::MetaReply;
    use crate::types::{InodeType, Session};

    fn sample() -> Message {
        Message::Request {
            rid: 7,
            req: Request::Meta {
                partition: 3,
                session: Some(Session { client: 1, seq: 2 }),
                ack_below: 1,
                op: MetaOp::CreateDentry { parent: 1, name: "a".into(), child: 7, kind: InodeType::File },
            },
        }
    }

    #[test]
    fn header_layout() {
        let f = encode(&sample());
        assert_eq!(&f[..8], b"CFSMSG01");
        assert_eq!(u16::from_le_bytes([f[8], f[9]]), msg_type::META_CREATE_DENTRY);
        assert_eq!(u64::from_le_bytes(f[10..18].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(f[18..26].try_into().unwrap()), 0);
        let len = u32::from_le_bytes(f[26..30].try_into().unwrap()) as usize;
        assert_eq!(f.len(), HEADER_LEN + len + 4);
        assert_eq!(decode(&f).unwrap(), sample());
    }

    #[test]
    fn raft_term_in_header() {
        let m = Message::Raft { group: 9, msg: RaftMsg::Vote { term: 42, granted: true } };
        let f = encode(&m);
        let h = decode_header(&f).unwrap();
        assert_eq!((h.msg_type, h.group, h.term), (msg_type::RAFT_VOTE, 9, 42));
        assert_eq!(read_frame(&mut &f[..]).unwrap(), m);
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let m = Message::Response { rid: 1, resp: Response::Meta(Ok(MetaReply::Nlink(3))) };
        let f = encode(&m);
        for i in 0..f.len() {
            for bit in [0x01u8, 0x80] {
                let mut bad = f.clone();
                bad[i] ^= bit;
                assert!(decode(&bad).is_err(), "byte {i}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for code in 0..200u16 {
            let n = type_name(code);
            if n != "unknown" {
                assert_eq!(type_code(n), Some(code));
            }
        }
        assert_eq!(type_code("meta_create_dentry"), Some(msg_type::META_CREATE_DENTRY));
    }
}
