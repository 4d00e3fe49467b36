//! Path resolution and the create, link and unlink workflows. Each runs
//! as a sequence of single-partition steps ordered so that a failure at
//! any point leaves at worst an orphan inode, never a dangling dentry.

use super::rpc::{meta_err, Failure};
use super::{FsError, MountedVolume, Transport, Unsettled};
use crate::meta::{validate_name, Dentry, Inode, MetaError};
use crate::proto::{DataOp, DataReply, MetaOp, MetaReply, Request, Response};
use crate::types::{InodeId, InodeType, Session, ROOT_INODE};

enum DentryOutcome {
    Created,
    /// Definitely not created.
    Absent(FsError),
    /// Unknown; recorded as unsettled.
    Unknown(FsError),
}

fn is_final(e: &FsError) -> bool {
    matches!(e, FsError::Exists | FsError::NotFound | FsError::NotDirectory | FsError::InvalidName)
}

/// Splits an absolute or relative path into its components.
pub fn components(path: &str) -> Vec<&str> {
    path.split('/').filter(|c| !c.is_empty() && *c != ".").collect()
}

/// Splits a path into its parent and final name.
pub fn split_parent(path: &str) -> Result<(String, String), FsError> {
    let mut c = components(path);
    let name = c.pop().ok_or(FsError::InvalidName)?;
    Ok((c.join("/"), name.to_string()))
}

impl<T: Transport> MountedVolume<T> {
    async fn lookup(&mut self, parent: InodeId, name: &str) -> Result<Dentry, FsError> {
        if let Some(d) = self.dentries.get(&(parent, name.to_string())) {
            return Ok(d.clone());
        }
        match self.meta_at(parent, MetaOp::Lookup { parent, name: name.to_string() }).await? {
            MetaReply::Dentry(d) => {
                self.cache_dentry(&d);
                Ok(d)
            }
            _ => Err(FsError::MetaUnavailable("unexpected lookup reply".into())),
        }
    }

    /// Resolves a path to its inode id by walking dentries from the root.
    pub async fn resolve_path(&mut self, path: &str) -> Result<InodeId, FsError> {
        Ok(self.resolve_dentry(path).await?.map_or(ROOT_INODE, |d| d.child))
    }

    /// The dentry naming `path`, or `None` for the root.
    async fn resolve_dentry(&mut self, path: &str) -> Result<Option<Dentry>, FsError> {
        self.maybe_background().await;
        let parts = components(path);
        let mut cur = ROOT_INODE;
        let mut last = None;
        for (i, name) in parts.iter().enumerate() {
            let d = self.lookup(cur, name).await?;
            if i + 1 < parts.len() && d.kind != InodeType::Directory {
                return Err(FsError::NotDirectory);
            }
            cur = d.child;
            last = Some(d);
        }
        Ok(last)
    }

    async fn resolve_dir(&mut self, path: &str) -> Result<InodeId, FsError> {
        match self.resolve_dentry(path).await? {
            None => Ok(ROOT_INODE),
            Some(d) if d.kind == InodeType::Directory => Ok(d.child),
            Some(_) => Err(FsError::NotDirectory),
        }
    }

    pub async fn stat(&mut self, path: &str) -> Result<Inode, FsError> {
        let ino = self.resolve_path(path).await?;
        self.get_inode(ino).await
    }

    pub async fn get_inode(&mut self, ino: InodeId) -> Result<Inode, FsError> {
        match self.meta_at(ino, MetaOp::GetInode { ino }).await? {
            MetaReply::Inode(i) if !i.is_deleted() => {
                if self.cfg.metadata_cache {
                    self.inodes.insert(ino, i.clone());
                }
                Ok(i)
            }
            MetaReply::Inode(_) => Err(FsError::NotFound),
            _ => Err(FsError::MetaUnavailable("unexpected inode reply".into())),
        }
    }

    /// Directory entries of `path` with their inodes, sorted by name.
    pub async fn list_dir(&mut self, path: &str) -> Result<Vec<(Dentry, Option<Inode>)>, FsError> {
        let dir = self.resolve_dir(path).await?;
        let entries = match self.meta_at(dir, MetaOp::ReadDir { parent: dir }).await? {
            MetaReply::Dentries(d) => d,
            _ => return Err(FsError::MetaUnavailable("unexpected readdir reply".into())),
        };
        // Batch the inode fetches per owning partition.
        let mut by_partition: std::collections::BTreeMap<u64, Vec<InodeId>> = Default::default();
        for d in &entries {
            self.cache_dentry(d);
            let pid = self.meta_partition_for(d.child).map_or(0, |p| p.id);
            by_partition.entry(pid).or_default().push(d.child);
        }
        for ids in by_partition.into_values() {
            let first = ids[0];
            if let Ok(MetaReply::Inodes { found, .. }) = self.meta_at(first, MetaOp::BatchInodeGet { ids }).await {
                for i in found {
                    if !i.is_deleted() && self.cfg.metadata_cache {
                        self.inodes.insert(i.id, i);
                    }
                }
            }
        }
        Ok(entries
            .into_iter()
            .map(|d| {
                let i = self.inodes.get(&d.child).cloned();
                (d, i)
            })
            .collect())
    }

    /// Creates an inode on a random writable meta partition. Unknown
    /// outcomes are settled before trying elsewhere.
    async fn create_inode(&mut self, kind: InodeType, link_target: Vec<u8>) -> Result<Inode, FsError> {
        let mut excluded = std::collections::BTreeSet::new();
        for _ in 0..=self.cfg.max_retries + 4 {
            let view = self.view().await?.clone();
            let cands: Vec<_> =
                view.meta.iter().filter(|p| p.status.is_writable() && !excluded.contains(&p.id) && !self.unwritable.contains(&p.id)).collect();
            if cands.is_empty() {
                if excluded.is_empty() {
                    return Err(FsError::NoWritablePartition);
                }
                excluded.clear();
                self.refresh_view().await?;
                continue;
            }
            let desc = cands[self.random_index(cands.len())].clone();
            let session = self.next_session();
            let op = MetaOp::CreateInode { kind, link_target: link_target.clone() };
            match self.meta_on(&desc, op, Some(session)).await {
                Ok(Ok(MetaReply::Inode(i))) => return Ok(i),
                Ok(Ok(_)) => return Err(FsError::MetaUnavailable("unexpected create reply".into())),
                Ok(Err(MetaError::PartitionReadOnly | MetaError::RangeExhausted)) => {
                    self.unwritable.insert(desc.id);
                    excluded.insert(desc.id);
                }
                Ok(Err(e)) => return Err(meta_err(e)),
                Err(f) => match self.resolve(&desc, session).await {
                    Some(Some(Response::Meta(Ok(MetaReply::Inode(i))))) => return Ok(i),
                    Some(_) => {
                        excluded.insert(desc.id);
                    }
                    None => {
                        self.unsettled.push(Unsettled {
                            partition: desc.id,
                            session,
                            inode: None,
                            what: format!("createInode: {}", f.reason),
                        });
                        return Err(f.into());
                    }
                },
            }
        }
        Err(FsError::NoWritablePartition)
    }

    /// Adds a dentry, settling an unknown outcome through the session.
    async fn add_dentry(&mut self, parent: InodeId, name: &str, child: InodeId, kind: InodeType) -> DentryOutcome {
        let session = self.next_session();
        let op = MetaOp::CreateDentry { parent, name: name.to_string(), child, kind };
        let Some(desc) = self.owner(parent).await else { return DentryOutcome::Absent(FsError::NotFound) };
        match self.meta_on(&desc, op, Some(session)).await {
            Ok(Ok(_)) => DentryOutcome::Created,
            Ok(Err(e)) => DentryOutcome::Absent(meta_err(e)),
            Err(f) => match self.resolve(&desc, session).await {
                Some(Some(Response::Meta(Ok(_)))) => DentryOutcome::Created,
                Some(Some(Response::Meta(Err(e)))) => DentryOutcome::Absent(meta_err(e)),
                Some(_) => DentryOutcome::Absent(FsError::CommitStalled),
                None => {
                    self.unsettled.push(Unsettled { partition: desc.id, session, inode: Some(child), what: format!("createDentry: {}", f.reason) });
                    DentryOutcome::Unknown(f.into())
                }
            },
        }
    }

    async fn owner(&mut self, ino: InodeId) -> Option<crate::types::PartitionDescriptor> {
        self.view().await.ok()?;
        if let Some(d) = self.meta_partition_for(ino) {
            return Some(d);
        }
        self.refresh_view().await.ok()?;
        self.meta_partition_for(ino)
    }

    /// Drops one link of an inode; a released inode is queued for eviction.
    /// Returns whether the unlink is known to have happened.
    async fn drop_link(&mut self, ino: InodeId, kind: InodeType) -> bool {
        let session = self.next_session();
        let Some(desc) = self.owner(ino).await else { return false };
        let outcome = match self.meta_on(&desc, MetaOp::UnlinkInode { ino }, Some(session)).await {
            Ok(r) => Some(r),
            Err(_) => match self.resolve(&desc, session).await {
                Some(Some(Response::Meta(r))) => Some(r),
                Some(_) => {
                    // Fenced: retry once with a fresh session.
                    let s2 = self.next_session();
                    self.meta_on(&desc, MetaOp::UnlinkInode { ino }, Some(s2)).await.ok()
                }
                None => None,
            },
        };
        self.inodes.remove(&ino);
        match outcome {
            Some(Ok(MetaReply::Nlink(n))) => {
                if n == 0 || kind == InodeType::Directory {
                    self.orphans.insert(ino);
                }
                true
            }
            Some(Err(MetaError::NotFound)) => true,
            _ => {
                self.unsettled.push(Unsettled { partition: desc.id, session, inode: Some(ino), what: "unlinkInode".into() });
                false
            }
        }
    }

    /// Creates a file, directory or symlink named `name` under `parent`.
    pub async fn create(&mut self, parent: &str, name: &str, kind: InodeType, link_target: Vec<u8>) -> Result<InodeId, FsError> {
        validate_name(name).map_err(meta_err)?;
        let dir = self.resolve_dir(parent).await?;
        if self.dentries.contains_key(&(dir, name.to_string())) {
            return Err(FsError::Exists);
        }
        let inode = self.create_inode(kind, link_target).await?;
        let ino = inode.id;
        let mut last = FsError::CommitStalled;
        for attempt in 0..=self.cfg.max_retries {
            match self.add_dentry(dir, name, ino, kind).await {
                DentryOutcome::Created => {
                    self.cache_dentry(&Dentry { parent: dir, name: name.to_string(), child: ino, kind });
                    if kind == InodeType::Directory {
                        let _ = self.meta_at(dir, MetaOp::AdjustDirLinks { ino: dir, delta: 1 }).await;
                    }
                    if self.cfg.metadata_cache {
                        self.inodes.insert(ino, inode);
                    }
                    return Ok(ino);
                }
                DentryOutcome::Unknown(e) => return Err(e),
                DentryOutcome::Absent(e) if is_final(&e) => {
                    last = e;
                    break;
                }
                DentryOutcome::Absent(e) => last = e,
            }
            if attempt < self.cfg.max_retries {
                self.t.sleep(self.cfg.backoff_ms << attempt).await;
            }
        }
        // The dentry never appeared: release the inode.
        self.drop_link(ino, kind).await;
        if is_final(&last) {
            Err(last)
        } else {
            Err(FsError::OrphanRecorded(ino))
        }
    }

    pub async fn create_file(&mut self, path: &str) -> Result<InodeId, FsError> {
        let (parent, name) = split_parent(path)?;
        self.create(&parent, &name, InodeType::File, Vec::new()).await
    }

    pub async fn mkdir(&mut self, path: &str) -> Result<InodeId, FsError> {
        let (parent, name) = split_parent(path)?;
        self.create(&parent, &name, InodeType::Directory, Vec::new()).await
    }

    pub async fn symlink(&mut self, path: &str, target: &str) -> Result<InodeId, FsError> {
        let (parent, name) = split_parent(path)?;
        self.create(&parent, &name, InodeType::Symlink, target.as_bytes().to_vec()).await
    }

    /// Adds a hard link `new_path` to the file at `existing`.
    pub async fn link(&mut self, existing: &str, new_path: &str) -> Result<(), FsError> {
        let src = self.resolve_dentry(existing).await?.ok_or(FsError::IsDirectory)?;
        if src.kind == InodeType::Directory {
            return Err(FsError::IsDirectory);
        }
        let (parent, name) = split_parent(new_path)?;
        validate_name(&name).map_err(meta_err)?;
        let dir = self.resolve_dir(&parent).await?;
        let ino = src.child;
        match self.meta_at(ino, MetaOp::Link { ino }).await {
            Ok(_) => {}
            Err(e) => return Err(e),
        }
        self.inodes.remove(&ino);
        let mut last = FsError::CommitStalled;
        for attempt in 0..=self.cfg.max_retries {
            match self.add_dentry(dir, &name, ino, src.kind).await {
                DentryOutcome::Created => {
                    self.cache_dentry(&Dentry { parent: dir, name, child: ino, kind: src.kind });
                    return Ok(());
                }
                DentryOutcome::Unknown(e) => return Err(e),
                DentryOutcome::Absent(e) if is_final(&e) => {
                    last = e;
                    break;
                }
                DentryOutcome::Absent(e) => last = e,
            }
            if attempt < self.cfg.max_retries {
                self.t.sleep(self.cfg.backoff_ms << attempt).await;
            }
        }
        // Undo the link count increase.
        self.drop_link(ino, src.kind).await;
        Err(last)
    }

    /// Removes the name `path`; a file whose last link goes is deleted in
    /// the background.
    pub async fn unlink(&mut self, path: &str) -> Result<(), FsError> {
        let d = self.resolve_dentry(path).await?.ok_or(FsError::IsDirectory)?;
        if d.kind == InodeType::Directory {
            return Err(FsError::IsDirectory);
        }
        self.remove_dentry(&d).await?;
        self.drop_link(d.child, d.kind).await;
        Ok(())
    }

    pub async fn delete_file(&mut self, path: &str) -> Result<(), FsError> {
        self.unlink(path).await
    }

    pub async fn rmdir(&mut self, path: &str) -> Result<(), FsError> {
        let d = self.resolve_dentry(path).await?.ok_or(FsError::InvalidName)?;
        if d.kind != InodeType::Directory {
            return Err(FsError::NotDirectory);
        }
        match self.meta_at(d.child, MetaOp::ReadDir { parent: d.child }).await {
            Ok(MetaReply::Dentries(e)) if !e.is_empty() => return Err(FsError::NotEmpty),
            Ok(_) | Err(FsError::NotFound) => {}
            Err(e) => return Err(e),
        }
        self.remove_dentry(&d).await?;
        self.dentries.retain(|(p, _), _| *p != d.child);
        let _ = self.meta_at(d.parent, MetaOp::AdjustDirLinks { ino: d.parent, delta: -1 }).await;
        self.drop_link(d.child, d.kind).await;
        Ok(())
    }

    async fn remove_dentry(&mut self, d: &Dentry) -> Result<(), FsError> {
        self.forget_dentry(d.parent, &d.name);
        let session = self.next_session();
        let Some(desc) = self.owner(d.parent).await else { return Err(FsError::NotFound) };
        let op = MetaOp::DeleteDentry { parent: d.parent, name: d.name.clone() };
        let r = match self.meta_on(&desc, op, Some(session)).await {
            Ok(r) => r,
            Err(f) => match self.resolve(&desc, session).await {
                Some(Some(Response::Meta(r))) => r,
                Some(_) => return Err(Failure { partition: desc.id, reason: f.reason }.into()),
                None => return Err(f.into()),
            },
        };
        match r {
            Ok(MetaReply::Dentry(removed)) if removed.child == d.child => Ok(()),
            Ok(MetaReply::Dentry(removed)) => {
                // Someone replaced the name; release what we actually removed.
                self.drop_link(removed.child, removed.kind).await;
                Ok(())
            }
            Ok(_) => Ok(()),
            Err(e) => Err(meta_err(e)),
        }
    }

    /// Frees an orphan's data and then removes the inode.
    pub(super) async fn evict_one(&mut self, ino: InodeId) -> Result<(), FsError> {
        let inode = match self.meta_at(ino, MetaOp::GetInode { ino }).await {
            Ok(MetaReply::Inode(i)) => i,
            Err(FsError::NotFound) => return Ok(()),
            Ok(_) => return Err(FsError::MetaUnavailable("unexpected inode reply".into())),
            Err(e) => return Err(e),
        };
        if !inode.is_deleted() {
            // Still linked (a compensated link or a racing create): nothing
            // to evict.
            return Ok(());
        }
        self.free_content(&inode.extents).await?;
        match self.meta_at(ino, MetaOp::Evict { ino }).await {
            Ok(_) | Err(FsError::NotFound) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Frees the bytes behind extent keys on their data partitions.
    pub(super) async fn free_content(&mut self, keys: &[crate::types::ExtentKey]) -> Result<(), FsError> {
        for k in keys {
            self.view().await?;
            let Some(desc) = self.data_partition(k.partition_id) else { continue };
            let session = self.next_session();
            let req = Request::Data {
                partition: desc.id,
                session: Some(session),
                ack_below: session.seq,
                op: DataOp::DeleteContent { extent: k.extent_id, offset: k.extent_offset, len: k.size },
            };
            match self.route(desc.id, &desc.replicas, &req).await {
                super::rpc::Routed::Reply(Response::Data(Ok(DataReply::Done))) => {}
                super::rpc::Routed::Reply(Response::Data(Err(e))) => return Err(FsError::Data(e)),
                super::rpc::Routed::Stale => {}
                _ => return Err(FsError::DataUnavailable(format!("partition {}", desc.id))),
            }
        }
        Ok(())
    }

    #[doc(hidden)]
    pub fn session_of_last_request(&self) -> Session {
        Session { client: self.client_id, seq: self.seq }
    }
}
