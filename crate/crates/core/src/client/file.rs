//! Open files: sequential appends through the primary-backup chain, in-place
//! overwrites through Raft, and reads from partition leaders.

use super::rpc::Routed;
use super::{FsError, MountedVolume, Transport};
use crate::extent::ExtentError;
use crate::extent_map::{self, Piece};
use crate::meta::Inode;
use crate::proto::{DataError, DataOp, DataReply, MetaOp, MetaReply, Request, Response};
use crate::types::{ExtentId, ExtentKey, InodeId, InodeType, PartitionId};

pub struct FileHandle {
    pub ino: InodeId,
    writable: bool,
    keys: Vec<ExtentKey>,
    size: u64,
    small: bool,
    /// Keys written but not yet pushed to the meta node.
    dirty: Vec<ExtentKey>,
    /// Extent this handle keeps appending to.
    tail: Option<(PartitionId, ExtentId)>,
    last_push: u64,
}

impl FileHandle {
    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn keys(&self) -> &[ExtentKey] {
        &self.keys
    }

    pub fn is_small(&self) -> bool {
        self.small
    }

    pub fn is_dirty(&self) -> bool {
        !self.dirty.is_empty()
    }
}

enum Appended {
    Whole(ExtentKey),
    /// Only this many leading bytes committed.
    Prefix(ExtentKey),
    Retry,
}

impl<T: Transport> MountedVolume<T> {
    /// Opens a file; its extent keys are fetched fresh from the meta node.
    pub async fn open(&mut self, path: &str, writable: bool) -> Result<FileHandle, FsError> {
        let ino = self.resolve_path(path).await?;
        let inode = self.get_inode(ino).await?;
        if inode.kind == InodeType::Directory {
            return Err(FsError::IsDirectory);
        }
        Ok(self.handle(inode, writable))
    }

    fn handle(&self, inode: Inode, writable: bool) -> FileHandle {
        let tail = inode.extents.last().filter(|_| !inode.is_small()).map(|k| (k.partition_id, k.extent_id));
        FileHandle {
            ino: inode.id,
            writable,
            size: inode.size,
            small: inode.is_small(),
            keys: inode.extents,
            dirty: Vec::new(),
            tail,
            last_push: self.t.now_ms(),
        }
    }

    /// Creates a file and opens it for writing.
    pub async fn create_open(&mut self, path: &str) -> Result<FileHandle, FsError> {
        let ino = self.create_file(path).await?;
        let now = self.t.now_ms();
        Ok(FileHandle { ino, writable: true, keys: Vec::new(), size: 0, small: false, dirty: Vec::new(), tail: None, last_push: now })
    }

    /// Appends at the end of the file.
    pub async fn write(&mut self, h: &mut FileHandle, data: &[u8]) -> Result<u64, FsError> {
        let off = h.size;
        self.write_at(h, off, data).await
    }

    /// Writes at any offset: bytes inside the file are overwritten in place,
    /// bytes past the end are appended. A gap past the end reads as zeros.
    pub async fn write_at(&mut self, h: &mut FileHandle, off: u64, data: &[u8]) -> Result<u64, FsError> {
        if !h.writable {
            return Err(FsError::ReadOnlyHandle);
        }
        if data.is_empty() {
            return Ok(0);
        }
        self.maybe_background().await;
        self.view().await?;
        let end = off + data.len() as u64;
        let threshold = self.small_threshold();
        if h.size == 0 && h.keys.is_empty() && off == 0 && end <= threshold {
            self.write_small(h, data).await?;
            self.fsync(h).await?;
            return Ok(data.len() as u64);
        }
        if h.small && end > h.size {
            // A small file that grows is rewritten as a whole.
            self.rewrite(h, off, data).await?;
            return Ok(data.len() as u64);
        }
        let inside = end.min(h.size);
        if off < inside {
            self.overwrite(h, off, &data[..(inside - off) as usize]).await?;
        }
        if end > h.size {
            let from = off.max(h.size);
            let mut bytes = vec![0u8; (from - h.size) as usize];
            bytes.extend_from_slice(&data[(from - off) as usize..]);
            self.append_bytes(h, &bytes).await?;
        }
        if self.t.now_ms() >= h.last_push + self.cfg.sync_interval_ms {
            self.fsync(h).await?;
        }
        Ok(data.len() as u64)
    }

    async fn write_small(&mut self, h: &mut FileHandle, data: &[u8]) -> Result<(), FsError> {
        let key = self.append_packet(None, data, true, 0).await?;
        h.keys = vec![key];
        h.dirty = vec![key];
        h.size = data.len() as u64;
        h.small = true;
        h.tail = None;
        Ok(())
    }

    async fn rewrite(&mut self, h: &mut FileHandle, off: u64, data: &[u8]) -> Result<(), FsError> {
        self.fsync(h).await?;
        let mut content = self.read(h, 0, h.size).await?;
        let end = off as usize + data.len();
        if content.len() < end {
            content.resize(end, 0);
        }
        content[off as usize..end].copy_from_slice(data);
        let old = std::mem::take(&mut h.keys);
        h.size = 0;
        h.tail = None;
        h.dirty.clear();
        if content.len() as u64 <= self.small_threshold() {
            self.write_small(h, &content).await?;
        } else {
            h.small = false;
            self.append_bytes(h, &content).await?;
        }
        let small = h.small;
        let keys = std::mem::take(&mut h.dirty);
        self.push_keys(h.ino, keys, Some(small)).await?;
        h.last_push = self.t.now_ms();
        self.free_content(&old).await
    }

    async fn overwrite(&mut self, h: &FileHandle, off: u64, data: &[u8]) -> Result<(), FsError> {
        for piece in extent_map::pieces(&h.keys, off, off + data.len() as u64) {
            let Piece::Mapped(k) = piece else {
                return Err(FsError::DataUnavailable(format!("no extent maps offset {off}")));
            };
            let base = (k.file_offset - off) as usize;
            let mut done = 0u64;
            while done < k.size {
                let n = (k.size - done).min(self.cfg.packet_size as u64);
                let chunk = data[base + done as usize..base + (done + n) as usize].to_vec();
                self.overwrite_chunk(k.partition_id, k.extent_id, k.extent_offset + done, chunk).await?;
                done += n;
            }
        }
        Ok(())
    }

    async fn overwrite_chunk(&mut self, pid: PartitionId, extent: ExtentId, offset: u64, data: Vec<u8>) -> Result<(), FsError> {
        for attempt in 0..=self.cfg.max_retries {
            let Some(desc) = self.data_partition_fresh(pid).await else {
                return Err(FsError::DataUnavailable(format!("partition {pid} unknown")));
            };
            let session = self.next_session();
            let req = Request::Data {
                partition: pid,
                session: Some(session),
                ack_below: session.seq,
                op: DataOp::Overwrite { extent, offset, data: data.clone() },
            };
            match self.route(pid, &desc.replicas, &req).await {
                Routed::Reply(Response::Data(Ok(_))) => return Ok(()),
                Routed::Reply(Response::Data(Err(e))) => return Err(FsError::Data(e)),
                Routed::Reply(_) | Routed::Stale | Routed::Failed(_) => {}
            }
            // Overwrites are idempotent, so resending after an unknown
            // outcome is safe.
            self.t.sleep(self.cfg.backoff_ms << attempt).await;
        }
        Err(FsError::CommitStalled)
    }

    async fn data_partition_fresh(&mut self, pid: PartitionId) -> Option<crate::types::PartitionDescriptor> {
        self.view().await.ok()?;
        if let Some(d) = self.data_partition(pid) {
            return Some(d);
        }
        self.refresh_view().await.ok()?;
        self.data_partition(pid)
    }

    /// Appends at EOF in packets, each to the primary of a data partition.
    async fn append_bytes(&mut self, h: &mut FileHandle, data: &[u8]) -> Result<(), FsError> {
        for chunk in data.chunks(self.cfg.packet_size) {
            let mut rest = chunk;
            while !rest.is_empty() {
                let key = self.append_packet(h.tail, rest, false, h.size).await?;
                extent_map::insert(&mut h.keys, key);
                h.dirty.push(key);
                h.size = h.size.max(key.file_end());
                h.tail = Some((key.partition_id, key.extent_id));
                if key.size < rest.len() as u64 {
                    // Partial commit: resend the rest to another partition.
                    h.tail = None;
                    self.stats.resent_bytes += rest.len() as u64 - key.size;
                }
                rest = &rest[key.size as usize..];
            }
        }
        Ok(())
    }

    /// Sends one packet, returning the key of the committed prefix (the
    /// whole packet unless a replica failed mid-way).
    async fn append_packet(
        &mut self,
        tail: Option<(PartitionId, ExtentId)>,
        data: &[u8],
        small: bool,
        file_offset: u64,
    ) -> Result<ExtentKey, FsError> {
        let mut tail = tail;
        let mut refreshed = false;
        let limit = 2 * (self.cfg.max_retries as usize + 1) + 8;
        for _ in 0..limit {
            let view = self.view().await?.clone();
            let target = match tail {
                Some((pid, eid)) if !self.unwritable.contains(&pid) => {
                    view.data.iter().find(|p| p.id == pid && p.status.is_writable()).cloned().map(|d| (d, Some(eid)))
                }
                _ => None,
            };
            let (desc, extent) = match target {
                Some(t) => t,
                None => {
                    let cands: Vec<_> =
                        view.data.iter().filter(|p| p.status.is_writable() && !self.unwritable.contains(&p.id)).cloned().collect();
                    if cands.is_empty() {
                        if refreshed {
                            return Err(FsError::NoWritablePartition);
                        }
                        refreshed = true;
                        self.t.sleep(self.cfg.backoff_ms).await;
                        self.refresh_view().await?;
                        continue;
                    }
                    (cands[self.random_index(cands.len())].clone(), None)
                }
            };
            match self.try_append(&desc, extent, small, data, file_offset).await {
                Appended::Whole(k) | Appended::Prefix(k) => return Ok(k),
                // A refused extent or partition is not retried.
                Appended::Retry => tail = None,
            }
        }
        Err(FsError::CommitStalled)
    }

    async fn try_append(
        &mut self,
        desc: &crate::types::PartitionDescriptor,
        extent: Option<ExtentId>,
        small: bool,
        data: &[u8],
        file_offset: u64,
    ) -> Appended {
        let req = Request::Append { partition: desc.id, extent, small, data: data.to_vec() };
        self.stats.requests += 1;
        let res = self.t.call(&desc.replicas[0], req, self.cfg.request_timeout_ms).await;
        match res {
            Ok(Response::Data(Ok(DataReply::Appended { mut key, .. }))) => {
                key.file_offset = file_offset;
                Appended::Whole(key)
            }
            Ok(Response::Data(Err(DataError::ReplicaTimeout { extent, offset, committed }))) => {
                self.unwritable.insert(desc.id);
                if committed > offset {
                    let size = (committed - offset).min(data.len() as u64);
                    let key = ExtentKey { partition_id: desc.id, extent_id: extent, extent_offset: offset, size, file_offset };
                    return Appended::Prefix(key);
                }
                Appended::Retry
            }
            Ok(Response::Data(Err(DataError::Extent(ExtentError::ExtentFull | ExtentError::NotFound | ExtentError::InvalidRange))))
                if extent.is_some() =>
            {
                Appended::Retry
            }
            Ok(other) => {
                log::debug!("append to partition {} refused: {other:?}", desc.id);
                self.unwritable.insert(desc.id);
                Appended::Retry
            }
            Err(e) => {
                log::debug!("append to partition {} failed: {e}", desc.id);
                self.stats.timeouts += 1;
                self.unwritable.insert(desc.id);
                Appended::Retry
            }
        }
    }

    async fn push_keys(&mut self, ino: InodeId, keys: Vec<ExtentKey>, small: Option<bool>) -> Result<Vec<ExtentKey>, FsError> {
        match self.meta_at(ino, MetaOp::AppendExtentKeys { ino, keys, small }).await? {
            MetaReply::Displaced(d) => Ok(d),
            _ => Err(FsError::MetaUnavailable("unexpected reply to key push".into())),
        }
    }

    /// Pushes the handle's new extent keys to the meta node; returns once
    /// they are committed there.
    pub async fn fsync(&mut self, h: &mut FileHandle) -> Result<(), FsError> {
        h.last_push = self.t.now_ms();
        if h.dirty.is_empty() {
            return Ok(());
        }
        let keys = h.dirty.clone();
        let small = if h.small { Some(true) } else { None };
        self.push_keys(h.ino, keys, small).await?;
        h.dirty.clear();
        self.inodes.remove(&h.ino);
        Ok(())
    }

    pub async fn close(&mut self, mut h: FileHandle) -> Result<(), FsError> {
        self.fsync(&mut h).await
    }

    /// Reads up to `len` bytes at `off`; short at end of file.
    pub async fn read(&mut self, h: &FileHandle, off: u64, len: u64) -> Result<Vec<u8>, FsError> {
        let end = off.saturating_add(len).min(h.size);
        if off >= end {
            return Ok(Vec::new());
        }
        self.view().await?;
        let mut out = Vec::with_capacity((end - off) as usize);
        for piece in extent_map::pieces(&h.keys, off, end) {
            match piece {
                Piece::Gap { len, .. } => out.resize(out.len() + len as usize, 0),
                Piece::Mapped(k) => {
                    let mut done = 0;
                    while done < k.size {
                        let n = (k.size - done).min(self.cfg.packet_size as u64 * 8);
                        let bytes = self.read_extent(k.partition_id, k.extent_id, k.extent_offset + done, n).await?;
                        out.extend_from_slice(&bytes);
                        done += n;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reads a whole file by path.
    pub async fn read_file(&mut self, path: &str) -> Result<Vec<u8>, FsError> {
        let h = self.open(path, false).await?;
        let size = h.size;
        self.read(&h, 0, size).await
    }

    async fn read_extent(&mut self, pid: PartitionId, extent: ExtentId, offset: u64, len: u64) -> Result<Vec<u8>, FsError> {
        for attempt in 0..=self.cfg.max_retries {
            let Some(desc) = self.data_partition_fresh(pid).await else {
                return Err(FsError::DataUnavailable(format!("partition {pid} unknown")));
            };
            let req = Request::Read { partition: pid, extent, offset, len };
            let before = self.stats.requests;
            let r = self.route(pid, &desc.replicas, &req).await;
            self.stats.read_retries += self.stats.requests - before - 1;
            match r {
                Routed::Reply(Response::Data(Ok(DataReply::Bytes(b)))) => return Ok(b),
                Routed::Reply(Response::Data(Err(e))) => return Err(FsError::Data(e)),
                Routed::Reply(other) => log::debug!("read from partition {pid}: unexpected {other:?}"),
                Routed::Stale | Routed::Failed(_) => {}
            }
            self.t.sleep(self.cfg.backoff_ms << attempt).await;
        }
        Err(FsError::DataUnavailable(format!("partition {pid}")))
    }
}
