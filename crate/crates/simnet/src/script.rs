//! Line-oriented text formats: topologies, fault scripts and workload
//! traces. Blank lines and `#` comments are ignored everywhere.

use std::fmt;

use cfs_core::proto::NodeSpec;
use cfs_core::types::{NodeId, NodeKind};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

fn err(line: usize, msg: impl Into<String>) -> ScriptError {
    ScriptError { line, msg: msg.into() }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, ScriptError> {
    s.parse().map_err(|_| err(line, format!("bad number {s:?}")))
}

/// Parses sizes like `4096`, `64K`, `10M`, `2G`.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (digits, mult) = match s.chars().last()? {
        'k' | 'K' => (&s[..s.len() - 1], 1u64 << 10),
        'm' | 'M' => (&s[..s.len() - 1], 1 << 20),
        'g' | 'G' => (&s[..s.len() - 1], 1 << 30),
        't' | 'T' => (&s[..s.len() - 1], 1 << 40),
        _ => (s, 1),
    };
    digits.parse::<u64>().ok()?.checked_mul(mult)
}

/// `node <id> <kind> <address> <capacityBytes> <raftSet>`, e.g.
/// `node 4 data 10.0.0.4:9500 10G 1`. Capacities take K/M/G/T suffixes.
pub fn parse_topology(text: &str) -> Result<Vec<NodeSpec>, ScriptError> {
    let mut out: Vec<NodeSpec> = Vec::new();
    for (line, f) in lines(text) {
        if f.len() != 6 || f[0] != "node" {
            return Err(err(line, "expected: node <id> <kind> <address> <capacityBytes> <raftSet>"));
        }
        let id = NodeId(num(line, f[1])?);
        let kind = NodeKind::parse(f[2]).ok_or_else(|| err(line, format!("unknown node kind {:?}", f[2])))?;
        let addr = f[3].to_string();
        let capacity = parse_size(f[4]).ok_or_else(|| err(line, format!("bad capacity {:?}", f[4])))?;
        let raft_set = num(line, f[5])?;
        if out.iter().any(|n| n.id == id) {
            return Err(err(line, format!("duplicate node {id}")));
        }
        out.push(NodeSpec { id, kind, addr, capacity, raft_set });
    }
    if !out.iter().any(|n| n.kind == NodeKind::Manager) {
        return Err(err(0, "topology has no manager node"));
    }
    Ok(out)
}

pub fn format_topology(nodes: &[NodeSpec]) -> String {
    nodes.iter().map(|n| format!("node {} {} {} {} {}\n", n.id.0, n.kind.as_str(), n.addr, n.capacity, n.raft_set)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FaultAction {
    Crash(NodeId),
    Restart(NodeId),
    Partition(NodeId, NodeId),
    Heal(NodeId, NodeId),
    Isolate(NodeId),
    HealAll,
    DropNext(u64),
    /// Delivers each of the next `n` messages twice.
    DuplicateNext(u64),
    Delay(u64, u64),
}

impl fmt::Display for FaultAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultAction::Crash(n) => write!(f, "crash {}", n.0),
            FaultAction::Restart(n) => write!(f, "restart {}", n.0),
            FaultAction::Partition(a, b) => write!(f, "partition {} {}", a.0, b.0),
            FaultAction::Heal(a, b) => write!(f, "heal {} {}", a.0, b.0),
            FaultAction::Isolate(n) => write!(f, "isolate {}", n.0),
            FaultAction::HealAll => f.write_str("heal-all"),
            FaultAction::DropNext(n) => write!(f, "drop-next {n}"),
            FaultAction::DuplicateNext(n) => write!(f, "duplicate-next {n}"),
            FaultAction::Delay(lo, hi) => write!(f, "delay {lo} {hi}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Directive {
    pub at: u64,
    pub action: FaultAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultScript {
    pub directives: Vec<Directive>,
}

impl FaultScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut directives = Vec::new();
        for (line, f) in lines(text) {
            if f.len() < 2 {
                return Err(err(line, "expected: <timeMs> <action> <args...>"));
            }
            let at = num(line, f[0])?;
            let arg = |i: usize| -> Result<u64, ScriptError> {
                f.get(i).ok_or_else(|| err(line, format!("{} needs more arguments", f[1]))).and_then(|s| num(line, s))
            };
            let node = |i: usize| -> Result<NodeId, ScriptError> { Ok(NodeId(arg(i)? as u32)) };
            let action = match f[1] {
                "crash" => FaultAction::Crash(node(2)?),
                "restart" => FaultAction::Restart(node(2)?),
                "partition" => FaultAction::Partition(node(2)?, node(3)?),
                "heal" => FaultAction::Heal(node(2)?, node(3)?),
                "isolate" => FaultAction::Isolate(node(2)?),
                "heal-all" => FaultAction::HealAll,
                "drop-next" => FaultAction::DropNext(arg(2)?),
                "duplicate-next" => FaultAction::DuplicateNext(arg(2)?),
                "delay" => FaultAction::Delay(arg(2)?, arg(3)?),
                other => return Err(err(line, format!("unknown fault action {other:?}"))),
            };
            directives.push(Directive { at, action });
        }
        directives.sort_by_key(|d| d.at);
        Ok(Self { directives })
    }
}

impl fmt::Display for FaultScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.directives {
            writeln!(f, "{} {}", d.at, d.action)?;
        }
        Ok(())
    }
}

/// One file-system operation of a workload trace. Written data is derived
/// from `seed` so traces stay small.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceOp {
    Mkdir(String),
    Create(String),
    Write { path: String, offset: u64, len: u64, seed: u64 },
    Append { path: String, len: u64, seed: u64 },
    Read(String),
    Link { existing: String, new: String },
    Unlink(String),
    Rmdir(String),
    Stat(String),
    List(String),
}

/// Deterministic bytes for a trace write.
pub fn trace_bytes(seed: u64, len: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len as usize];
    rng.fill_bytes(&mut v);
    v
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceOp::Mkdir(p) => write!(f, "mkdir {p}"),
            TraceOp::Create(p) => write!(f, "create {p}"),
            TraceOp::Write { path, offset, len, seed } => write!(f, "write {path} {offset} {len} {seed}"),
            TraceOp::Append { path, len, seed } => write!(f, "append {path} {len} {seed}"),
            TraceOp::Read(p) => write!(f, "read {p}"),
            TraceOp::Link { existing, new } => write!(f, "link {existing} {new}"),
            TraceOp::Unlink(p) => write!(f, "unlink {p}"),
            TraceOp::Rmdir(p) => write!(f, "rmdir {p}"),
            TraceOp::Stat(p) => write!(f, "stat {p}"),
            TraceOp::List(p) => write!(f, "ls {p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimedOp {
    /// Earliest virtual time the op may start.
    pub at: u64,
    pub op: TraceOp,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub ops: Vec<TimedOp>,
}

impl Trace {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut ops = Vec::new();
        for (line, f) in lines(text) {
            if f.len() < 3 {
                return Err(err(line, "expected: <timeMs> <op> <args...>"));
            }
            let at = num(line, f[0])?;
            let need = |n: usize| if f.len() < n + 2 { Err(err(line, format!("{} needs {n} arguments", f[1]))) } else { Ok(()) };
            let p = f[2].to_string();
            let op = match f[1] {
                "mkdir" => TraceOp::Mkdir(p),
                "create" => TraceOp::Create(p),
                "write" => {
                    need(4)?;
                    TraceOp::Write { path: p, offset: num(line, f[3])?, len: num(line, f[4])?, seed: num(line, f[5])? }
                }
                "append" => {
                    need(3)?;
                    TraceOp::Append { path: p, len: num(line, f[3])?, seed: num(line, f[4])? }
                }
                "read" => TraceOp::Read(p),
                "link" => {
                    need(2)?;
                    TraceOp::Link { existing: p, new: f[3].to_string() }
                }
                "unlink" => TraceOp::Unlink(p),
                "rmdir" => TraceOp::Rmdir(p),
                "stat" => TraceOp::Stat(p),
                "ls" => TraceOp::List(p),
                other => return Err(err(line, format!("unknown op {other:?}"))),
            };
            ops.push(TimedOp { at, op });
        }
        Ok(Self { ops })
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.ops {
            writeln!(f, "{} {}", o.at, o.op)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096"), Some(4096));
        assert_eq!(parse_size("64K"), Some(65536));
        assert_eq!(parse_size("2g"), Some(2 << 30));
        assert_eq!(parse_size("x"), None);
    }

    #[test]
    fn topology_round_trip() {
        let t = parse_topology("# managers\nnode 1 manager sim:1 1G 0\nnode 2 meta sim:2 8589934592 1\nnode 3 data 10.0.0.3:9500 64G 1\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[2].kind, NodeKind::Data);
        assert_eq!(parse_topology(&format_topology(&t)).unwrap(), t);
        assert_eq!(t[1].capacity, 8 << 30);
        assert!(parse_topology("node 1 meta sim:1 1G 0").is_err());
        assert!(parse_topology("node 1 manager sim:1 1G 0\nnode 1 data sim:1 1G 0").is_err());
        assert!(parse_topology("1 manager 1G 0").is_err());
    }

    #[test]
    fn faults_parse_and_sort() {
        let s = FaultScript::parse("500 restart 3\n100 crash 3\n200 partition 1 2\n300 drop-next 4\n400 duplicate-next 2\n").unwrap();
        assert_eq!(s.directives[0], Directive { at: 100, action: FaultAction::Crash(NodeId(3)) });
        assert_eq!(s.directives.len(), 5);
        assert_eq!(FaultScript::parse(&s.to_string()).unwrap(), s);
        assert!(FaultScript::parse("10 explode 1").is_err());
        assert!(FaultScript::parse("10 crash").is_err());
    }

    #[test]
    fn trace_round_trip() {
        let text = "0 mkdir /d\n0 create /d/f\n5 write /d/f 10 100 7\n5 append /d/f 3 1\n6 link /d/f /g\n7 read /g\n8 unlink /g\n9 rmdir /d\n9 stat /\n9 ls /\n";
        let t = Trace::parse(text).unwrap();
        assert_eq!(t.ops.len(), 10);
        assert_eq!(t.to_string(), text);
        assert!(Trace::parse("0 write /f 1").is_err());
    }

    #[test]
    fn trace_bytes_are_deterministic() {
        assert_eq!(trace_bytes(3, 100), trace_bytes(3, 100));
        assert_ne!(trace_bytes(3, 100), trace_bytes(4, 100));
    }
}
