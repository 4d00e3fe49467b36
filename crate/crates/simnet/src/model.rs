//! Single-node in-memory reference file system with the same semantics
//! and error classes as the client.

use std::collections::BTreeMap;

use cfs_core::client::FsError;
use cfs_core::types::InodeType;

use crate::script::{trace_bytes, TraceOp};

/// Result of one operation, comparable between the model and a cluster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Bytes(Vec<u8>),
    Names(Vec<String>),
    Stat { kind: InodeType, size: u64, nlink: u32 },
    Err(String),
}

/// Error class names shared by the model and the client.
pub fn error_class(e: &FsError) -> String {
    match e {
        FsError::NotFound => "ENOENT",
        FsError::Exists => "EEXIST",
        FsError::NotDirectory => "ENOTDIR",
        FsError::IsDirectory => "EISDIR",
        FsError::NotEmpty => "ENOTEMPTY",
        FsError::InvalidName => "EINVAL",
        _ => return format!("EIO({e})"),
    }
    .to_string()
}

struct Node {
    kind: InodeType,
    data: Vec<u8>,
    nlink: u32,
}

/// Final visible state: every path with its kind and, for files, content.
pub type Snapshot = BTreeMap<String, (InodeType, Vec<u8>)>;

pub struct ModelFs {
    nodes: BTreeMap<u64, Node>,
    dirs: BTreeMap<u64, BTreeMap<String, u64>>,
    next: u64,
}

const ROOT: u64 = 1;

impl Default for ModelFs {
    fn default() -> Self {
        Self::new()
    }
}

fn parts(path: &str) -> Vec<&str> {
    path.split('/').filter(|c| !c.is_empty() && *c != ".").collect()
}

impl ModelFs {
    pub fn new() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(ROOT, Node { kind: InodeType::Directory, data: Vec::new(), nlink: 2 });
        let mut dirs = BTreeMap::new();
        dirs.insert(ROOT, BTreeMap::new());
        Self { nodes, dirs, next: 2 }
    }

    /// Resolves a path to (parent, name, inode) of its last component.
    fn walk(&self, path: &str) -> Result<Option<(u64, String, u64)>, &'static str> {
        let p = parts(path);
        let mut cur = ROOT;
        let mut last = None;
        for (i, name) in p.iter().enumerate() {
            let child = *self.dirs.get(&cur).and_then(|d| d.get(*name)).ok_or("ENOENT")?;
            if i + 1 < p.len() && self.nodes[&child].kind != InodeType::Directory {
                return Err("ENOTDIR");
            }
            last = Some((cur, name.to_string(), child));
            cur = child;
        }
        Ok(last)
    }

    fn ino(&self, path: &str) -> Result<u64, &'static str> {
        Ok(self.walk(path)?.map_or(ROOT, |(_, _, i)| i))
    }

    fn dir_of(&self, path: &str) -> Result<u64, &'static str> {
        let i = self.ino(path)?;
        if self.nodes[&i].kind != InodeType::Directory {
            return Err("ENOTDIR");
        }
        Ok(i)
    }

    fn split(path: &str) -> Result<(String, String), &'static str> {
        let mut p = parts(path);
        let name = p.pop().ok_or("EINVAL")?;
        Ok((p.join("/"), name.to_string()))
    }

    fn file(&self, path: &str) -> Result<u64, &'static str> {
        let i = self.ino(path)?;
        if self.nodes[&i].kind == InodeType::Directory {
            return Err("EISDIR");
        }
        Ok(i)
    }

    fn create(&mut self, path: &str, kind: InodeType) -> Result<Outcome, &'static str> {
        let (parent, name) = Self::split(path)?;
        let dir = self.dir_of(&parent)?;
        if self.dirs[&dir].contains_key(&name) {
            return Err("EEXIST");
        }
        let id = self.next;
        self.next += 1;
        let nlink = if kind == InodeType::Directory { 2 } else { 1 };
        self.nodes.insert(id, Node { kind, data: Vec::new(), nlink });
        if kind == InodeType::Directory {
            self.dirs.insert(id, BTreeMap::new());
            self.nodes.get_mut(&dir).unwrap().nlink += 1;
        }
        self.dirs.get_mut(&dir).unwrap().insert(name, id);
        Ok(Outcome::Ok)
    }

    fn write(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<Outcome, &'static str> {
        let i = self.file(path)?;
        let n = self.nodes.get_mut(&i).unwrap();
        let end = offset as usize + data.len();
        if n.data.len() < end {
            n.data.resize(end, 0);
        }
        n.data[offset as usize..end].copy_from_slice(data);
        Ok(Outcome::Ok)
    }

    fn release(&mut self, i: u64) {
        let n = self.nodes.get_mut(&i).unwrap();
        n.nlink = n.nlink.saturating_sub(1);
        if n.kind == InodeType::Directory || n.nlink == 0 {
            self.nodes.remove(&i);
            self.dirs.remove(&i);
        }
    }

    pub fn apply(&mut self, op: &TraceOp) -> Outcome {
        let r = match op {
            TraceOp::Mkdir(p) => self.create(p, InodeType::Directory),
            TraceOp::Create(p) => self.create(p, InodeType::File),
            TraceOp::Write { path, offset, len, seed } => self.write(path, *offset, &trace_bytes(*seed, *len)),
            TraceOp::Append { path, len, seed } => match self.file(path) {
                Ok(i) => {
                    let off = self.nodes[&i].data.len() as u64;
                    self.write(path, off, &trace_bytes(*seed, *len))
                }
                Err(e) => Err(e),
            },
            TraceOp::Read(p) => self.file(p).map(|i| Outcome::Bytes(self.nodes[&i].data.clone())),
            TraceOp::Link { existing, new } => self.link(existing, new),
            TraceOp::Unlink(p) => self.unlink(p),
            TraceOp::Rmdir(p) => self.rmdir(p),
            TraceOp::Stat(p) => self.ino(p).map(|i| {
                let n = &self.nodes[&i];
                let size = if n.kind == InodeType::Directory { 0 } else { n.data.len() as u64 };
                Outcome::Stat { kind: n.kind, size, nlink: n.nlink }
            }),
            TraceOp::List(p) => self.dir_of(p).map(|d| Outcome::Names(self.dirs[&d].keys().cloned().collect())),
        };
        r.unwrap_or_else(|e| Outcome::Err(e.to_string()))
    }

    fn link(&mut self, existing: &str, new: &str) -> Result<Outcome, &'static str> {
        let (_, _, src) = self.walk(existing)?.ok_or("EISDIR")?;
        if self.nodes[&src].kind == InodeType::Directory {
            return Err("EISDIR");
        }
        let (parent, name) = Self::split(new)?;
        let dir = self.dir_of(&parent)?;
        if self.dirs[&dir].contains_key(&name) {
            return Err("EEXIST");
        }
        self.nodes.get_mut(&src).unwrap().nlink += 1;
        self.dirs.get_mut(&dir).unwrap().insert(name, src);
        Ok(Outcome::Ok)
    }

    fn unlink(&mut self, path: &str) -> Result<Outcome, &'static str> {
        let (parent, name, i) = self.walk(path)?.ok_or("EISDIR")?;
        if self.nodes[&i].kind == InodeType::Directory {
            return Err("EISDIR");
        }
        self.dirs.get_mut(&parent).unwrap().remove(&name);
        self.release(i);
        Ok(Outcome::Ok)
    }

    fn rmdir(&mut self, path: &str) -> Result<Outcome, &'static str> {
        let (parent, name, i) = self.walk(path)?.ok_or("EINVAL")?;
        if self.nodes[&i].kind != InodeType::Directory {
            return Err("ENOTDIR");
        }
        if !self.dirs[&i].is_empty() {
            return Err("ENOTEMPTY");
        }
        self.dirs.get_mut(&parent).unwrap().remove(&name);
        self.release(i);
        let p = self.nodes.get_mut(&parent).unwrap();
        p.nlink = p.nlink.saturating_sub(1).max(2);
        Ok(Outcome::Ok)
    }

    /// Every reachable path, depth first.
    pub fn snapshot(&self) -> Snapshot {
        let mut out = BTreeMap::new();
        let mut stack = vec![(ROOT, String::new())];
        while let Some((dir, prefix)) = stack.pop() {
            for (name, &child) in &self.dirs[&dir] {
                let path = format!("{prefix}/{name}");
                let n = &self.nodes[&child];
                out.insert(path.clone(), (n.kind, n.data.clone()));
                if n.kind == InodeType::Directory {
                    stack.push((child, path));
                }
            }
        }
        out
    }

    /// Paths of existing files and directories, for trace generation.
    pub fn paths(&self) -> (Vec<String>, Vec<String>) {
        let snap = self.snapshot();
        let mut files = Vec::new();
        let mut dirs = vec!["/".to_string()];
        for (p, (k, _)) in snap {
            if k == InodeType::Directory {
                dirs.push(p);
            } else {
                files.push(p);
            }
        }
        (files, dirs)
    }

    pub fn file_len(&self, path: &str) -> Option<u64> {
        self.file(path).ok().map(|i| self.nodes[&i].data.len() as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(path: &str, offset: u64, len: u64) -> TraceOp {
        TraceOp::Write { path: path.into(), offset, len, seed: 9 }
    }

    #[test]
    fn namespace_semantics() {
        let mut m = ModelFs::new();
        assert_eq!(m.apply(&TraceOp::Mkdir("/d".into())), Outcome::Ok);
        assert_eq!(m.apply(&TraceOp::Mkdir("/d".into())), Outcome::Err("EEXIST".into()));
        assert_eq!(m.apply(&TraceOp::Create("/x/f".into())), Outcome::Err("ENOENT".into()));
        assert_eq!(m.apply(&TraceOp::Create("/d/f".into())), Outcome::Ok);
        assert_eq!(m.apply(&TraceOp::Create("/d/f/g".into())), Outcome::Err("ENOTDIR".into()));
        assert_eq!(m.apply(&TraceOp::Rmdir("/d".into())), Outcome::Err("ENOTEMPTY".into()));
        assert_eq!(m.apply(&TraceOp::Link { existing: "/d/f".into(), new: "/g".into() }), Outcome::Ok);
        assert_eq!(m.apply(&TraceOp::Stat("/g".into())), Outcome::Stat { kind: InodeType::File, size: 0, nlink: 2 });
        assert_eq!(m.apply(&TraceOp::Unlink("/d/f".into())), Outcome::Ok);
        assert_eq!(m.apply(&TraceOp::Stat("/g".into())), Outcome::Stat { kind: InodeType::File, size: 0, nlink: 1 });
        assert_eq!(m.apply(&TraceOp::Rmdir("/d".into())), Outcome::Ok);
        assert_eq!(m.apply(&TraceOp::Unlink("/d".into())), Outcome::Err("ENOENT".into()));
        assert_eq!(m.apply(&TraceOp::List("/".into())), Outcome::Names(vec!["g".into()]));
    }

    #[test]
    fn sparse_writes_fill_with_zeros() {
        let mut m = ModelFs::new();
        m.apply(&TraceOp::Create("/f".into()));
        m.apply(&w("/f", 4, 2));
        let Outcome::Bytes(b) = m.apply(&TraceOp::Read("/f".into())) else { panic!() };
        assert_eq!(&b[..4], &[0, 0, 0, 0]);
        assert_eq!(&b[4..], &trace_bytes(9, 2)[..]);
        m.apply(&w("/f", 0, 1));
        assert_eq!(m.file_len("/f"), Some(6));
    }

    #[test]
    fn hard_links_share_content() {
        let mut m = ModelFs::new();
        m.apply(&TraceOp::Create("/a".into()));
        m.apply(&TraceOp::Link { existing: "/a".into(), new: "/b".into() });
        m.apply(&TraceOp::Append { path: "/b".into(), len: 3, seed: 1 });
        assert_eq!(m.apply(&TraceOp::Read("/a".into())), Outcome::Bytes(trace_bytes(1, 3)));
        assert_eq!(m.apply(&TraceOp::Link { existing: "/".into(), new: "/c".into() }), Outcome::Err("EISDIR".into()));
    }
}
