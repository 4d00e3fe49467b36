//! Core of a CFS-style distributed file system: metadata partitions, the
//! extent store, replication, the resource manager and the client.

pub mod client;
pub mod codec;
pub mod extent;
pub mod extent_map;
pub mod manager;
pub mod meta;
pub mod net;
pub mod node;
pub mod proto;
pub mod raft;
pub mod sessions;
pub mod types;
pub mod wire;
