//! Raft consensus for one replication group, written as a sans-IO state
//! machine. The host feeds it messages and clock ticks, drains outgoing
//! messages, and applies committed entries itself.
//!
//! Liveness traffic is not sent per group. The host coalesces one heartbeat
//! per node pair per interval (see [`RaftCore::heartbeat_entry`] and
//! [`RaftCore::follower_entry`]).

mod log;

pub use log::{LogStore, SnapshotMeta};

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{GroupId, NodeId};

#[derive(Clone, Debug)]
pub struct RaftConfig {
    pub election_min_ms: u64,
    pub election_max_ms: u64,
    pub heartbeat_ms: u64,
    /// How long after a quorum acknowledgement the leader may serve reads.
    pub lease_ms: u64,
    pub max_append_bytes: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self { election_min_ms: 500, election_max_ms: 1000, heartbeat_ms: 100, lease_ms: 300, max_append_bytes: 1 << 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub term: u64,
    pub index: u64,
    /// Empty for the no-op a new leader appends.
    pub data: Vec<u8>,
    pub crc: u32,
}

impl Entry {
    pub fn new(term: u64, index: u64, data: Vec<u8>) -> Self {
        let crc = Self::checksum(term, index, &data);
        Self { term, index, data, crc }
    }

    fn checksum(term: u64, index: u64, data: &[u8]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&term.to_le_bytes());
        h.update(&index.to_le_bytes());
        h.update(data);
        h.finalize()
    }

    pub fn verify(&self) -> bool {
        self.crc == Self::checksum(self.term, self.index, &self.data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaftMsg {
    PreVote { term: u64, last_index: u64, last_term: u64 },
    /// `current` is the voter's own term so a lagging candidate catches up.
    PreVoteResp { term: u64, granted: bool, current: u64 },
    RequestVote { term: u64, last_index: u64, last_term: u64 },
    Vote { term: u64, granted: bool },
    Append { term: u64, prev_index: u64, prev_term: u64, entries: Vec<Entry>, commit: u64 },
    AppendResp { term: u64, success: bool, match_index: u64 },
    Snapshot { term: u64, meta: SnapshotMeta, data: Vec<u8> },
    SnapshotResp { term: u64, index: u64 },
}

impl RaftMsg {
    pub fn term(&self) -> u64 {
        match self {
            RaftMsg::PreVote { term, .. }
            | RaftMsg::PreVoteResp { term, .. }
            | RaftMsg::RequestVote { term, .. }
            | RaftMsg::Vote { term, .. }
            | RaftMsg::Append { term, .. }
            | RaftMsg::AppendResp { term, .. }
            | RaftMsg::Snapshot { term, .. }
            | RaftMsg::SnapshotResp { term, .. } => *term,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Follower,
    PreCandidate,
    Candidate,
    Leader,
}

#[derive(Clone, Debug, Default)]
struct Progress {
    next: u64,
    matched: u64,
    last_ack: u64,
    last_sent: u64,
}

#[derive(Debug)]
pub struct RaftCore {
    pub group: GroupId,
    pub id: NodeId,
    members: Vec<NodeId>,
    cfg: RaftConfig,
    log: LogStore,
    role: Role,
    leader: Option<NodeId>,
    commit: u64,
    election_deadline: u64,
    last_leader_contact: Option<u64>,
    votes: BTreeSet<NodeId>,
    progress: BTreeMap<NodeId, Progress>,
    term_start: u64,
    /// Follower: highest index known to match the current leader's log.
    leader_match: u64,
    rng: ChaCha8Rng,
    out: Vec<(NodeId, RaftMsg)>,
    installed: Option<(SnapshotMeta, Vec<u8>)>,
}

impl RaftCore {
    pub fn new(group: GroupId, id: NodeId, members: Vec<NodeId>, log: LogStore, cfg: RaftConfig, now: u64, seed: u64) -> Self {
        let commit = log.snapshot_meta().index;
        let rng = ChaCha8Rng::seed_from_u64(seed ^ group.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(id.0));
        let mut r = Self {
            group,
            id,
            members,
            cfg,
            log,
            role: Role::Follower,
            leader: None,
            commit,
            election_deadline: 0,
            last_leader_contact: None,
            votes: BTreeSet::new(),
            progress: BTreeMap::new(),
            term_start: u64::MAX,
            leader_match: 0,
            rng,
            out: Vec::new(),
            installed: None,
        };
        r.reset_election(now);
        r
    }

    /// Forgets everything not on disk, as after a process restart.
    pub fn restart(&mut self, now: u64) {
        self.role = Role::Follower;
        self.leader = None;
        self.commit = self.log.snapshot_meta().index;
        self.last_leader_contact = None;
        self.votes.clear();
        self.progress.clear();
        self.term_start = u64::MAX;
        self.leader_match = 0;
        self.out.clear();
        self.installed = None;
        self.reset_election(now);
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn peers(&self) -> impl Iterator<Item = NodeId> + '_ {
        let me = self.id;
        self.members.iter().copied().filter(move |&m| m != me)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn leader(&self) -> Option<NodeId> {
        self.leader
    }

    pub fn term(&self) -> u64 {
        self.log.term()
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn last_index(&self) -> u64 {
        self.log.last_index()
    }

    pub fn log(&self) -> &LogStore {
        &self.log
    }

    pub fn entry(&self, i: u64) -> Option<&Entry> {
        self.log.entry(i)
    }

    fn quorum(&self) -> usize {
        self.members.len() / 2 + 1
    }

    fn reset_election(&mut self, now: u64) {
        self.election_deadline = now + self.rng.gen_range(self.cfg.election_min_ms..=self.cfg.election_max_ms);
    }

    pub fn take_messages(&mut self) -> Vec<(NodeId, RaftMsg)> {
        std::mem::take(&mut self.out)
    }

    /// A snapshot received from the leader that the host must load into
    /// its state machine before applying further entries.
    pub fn take_installed_snapshot(&mut self) -> Option<(SnapshotMeta, Vec<u8>)> {
        self.installed.take()
    }

    fn send(&mut self, to: NodeId, m: RaftMsg) {
        self.out.push((to, m));
    }

    fn become_follower(&mut self, now: u64, term: u64, leader: Option<NodeId>) {
        if term > self.log.term() {
            self.log.set_hard_state(term, None);
            self.leader_match = 0;
        }
        self.role = Role::Follower;
        self.leader = leader;
        self.progress.clear();
        self.term_start = u64::MAX;
        self.reset_election(now);
    }

    fn log_up_to_date(&self, last_index: u64, last_term: u64) -> bool {
        (last_term, last_index) >= (self.log.last_term(), self.log.last_index())
    }

    fn leader_is_fresh(&self, now: u64) -> bool {
        match self.role {
            Role::Leader => true,
            _ => self.leader.is_some() && self.last_leader_contact.is_some_and(|t| now < t + self.cfg.election_min_ms),
        }
    }

    /// Starts an election right away; used by the first replica of a newly
    /// created group.
    pub fn campaign(&mut self, now: u64) {
        if self.members.len() == 1 || self.role != Role::Leader {
            self.start_election(now);
        }
    }

    fn start_pre_vote(&mut self, now: u64) {
        if self.members.len() == 1 {
            return self.start_election(now);
        }
        self.role = Role::PreCandidate;
        self.leader = None;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election(now);
        let m = RaftMsg::PreVote { term: self.log.term() + 1, last_index: self.log.last_index(), last_term: self.log.last_term() };
        for p in self.peers().collect::<Vec<_>>() {
            self.send(p, m.clone());
        }
    }

    fn start_election(&mut self, now: u64) {
        let term = self.log.term() + 1;
        self.log.set_hard_state(term, Some(self.id));
        self.role = Role::Candidate;
        self.leader = None;
        self.leader_match = 0;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election(now);
        if self.votes.len() >= self.quorum() {
            return self.become_leader(now);
        }
        let m = RaftMsg::RequestVote { term, last_index: self.log.last_index(), last_term: self.log.last_term() };
        for p in self.peers().collect::<Vec<_>>() {
            self.send(p, m.clone());
        }
    }

    fn become_leader(&mut self, now: u64) {
        self.role = Role::Leader;
        self.leader = Some(self.id);
        let next = self.log.last_index() + 1;
        self.progress = self.peers().map(|p| (p, Progress { next, matched: 0, last_ack: now, last_sent: 0 })).collect();
        let idx = self.log.last_index() + 1;
        self.log.append(Entry::new(self.log.term(), idx, Vec::new()));
        self.term_start = idx;
        self.broadcast_append(now, true);
        self.advance_commit();
    }

    /// Appends a command. Returns its log index.
    pub fn propose(&mut self, now: u64, data: Vec<u8>) -> Option<u64> {
        if self.role != Role::Leader {
            return None;
        }
        let idx = self.log.last_index() + 1;
        self.log.append(Entry::new(self.log.term(), idx, data));
        self.broadcast_append(now, false);
        self.advance_commit();
        Some(idx)
    }

    /// Sends entries to peers. Without `force`, only peers that are caught
    /// up (so the new entries extend what they have) are sent to.
    fn broadcast_append(&mut self, now: u64, force: bool) {
        let last = self.log.last_index();
        let peers: Vec<NodeId> = self.peers().collect();
        for p in peers {
            let pr = &self.progress[&p];
            if force || pr.next <= last && pr.next > pr.matched {
                self.send_append(now, p);
            }
        }
    }

    fn send_append(&mut self, now: u64, to: NodeId) {
        let Some(pr) = self.progress.get(&to) else { return };
        let next = pr.next.max(1);
        let prev_index = next - 1;
        let term = self.log.term();
        let Some(prev_term) = self.log.term_at(prev_index) else {
            // Compacted away: ship the snapshot instead.
            if let Some(data) = self.log.snapshot() {
                let m = RaftMsg::Snapshot { term, meta: self.log.snapshot_meta().clone(), data: data.to_vec() };
                self.send(to, m);
                if let Some(pr) = self.progress.get_mut(&to) {
                    pr.last_sent = now;
                }
            }
            return;
        };
        let entries = self.log.slice(next, self.cfg.max_append_bytes);
        let sent_to = prev_index + entries.len() as u64;
        let m = RaftMsg::Append { term, prev_index, prev_term, entries, commit: self.commit };
        self.send(to, m);
        let pr = self.progress.get_mut(&to).unwrap();
        pr.last_sent = now;
        pr.next = sent_to + 1;
    }

    fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let mut matched: Vec<u64> = self.progress.values().map(|p| p.matched).collect();
        matched.push(self.log.last_index());
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let n = matched[self.quorum() - 1];
        if n > self.commit && self.log.term_at(n) == Some(self.log.term()) {
            self.commit = n;
        }
    }

    /// Time at which a quorum (counting this node) last acknowledged it.
    fn quorum_ack(&self, now: u64) -> u64 {
        let mut acks: Vec<u64> = self.progress.values().map(|p| p.last_ack).collect();
        acks.push(now);
        acks.sort_unstable_by(|a, b| b.cmp(a));
        acks[self.quorum() - 1]
    }

    /// Whether reads may be served locally: leader of the current term with
    /// its first entry committed and a fresh quorum lease.
    pub fn can_read(&self, now: u64) -> bool {
        self.role == Role::Leader && self.commit >= self.term_start && now <= self.quorum_ack(now) + self.cfg.lease_ms
    }

    pub fn tick(&mut self, now: u64) {
        match self.role {
            Role::Leader => {
                if self.members.len() > 1 && now > self.quorum_ack(now) + self.cfg.election_max_ms {
                    // Lost contact with a quorum.
                    let term = self.log.term();
                    self.become_follower(now, term, None);
                    self.leader = None;
                    return;
                }
                let last = self.log.last_index();
                let peers: Vec<NodeId> = self.peers().collect();
                for p in peers {
                    let pr = &self.progress[&p];
                    if pr.matched < last && now >= pr.last_sent + self.cfg.heartbeat_ms {
                        if let Some(pr) = self.progress.get_mut(&p) {
                            pr.next = pr.next.min(pr.matched + 1).max(1);
                        }
                        self.send_append(now, p);
                    }
                }
            }
            _ => {
                if now >= self.election_deadline {
                    self.start_pre_vote(now);
                }
            }
        }
    }

    /// `(term, commit)` to advertise in this node's coalesced heartbeat,
    /// when leading.
    pub fn heartbeat_entry(&self) -> Option<(u64, u64)> {
        (self.role == Role::Leader).then(|| (self.log.term(), self.commit))
    }

    /// `(leader, term, matched)` to acknowledge in this node's coalesced
    /// heartbeat, when following a known leader.
    pub fn follower_entry(&self) -> Option<(NodeId, u64, u64)> {
        match (self.role, self.leader) {
            (Role::Follower, Some(l)) if l != self.id => Some((l, self.log.term(), self.leader_match)),
            _ => None,
        }
    }

    /// Leader liveness carried by a coalesced heartbeat from `from`.
    pub fn on_heartbeat(&mut self, now: u64, from: NodeId, term: u64, commit: u64) {
        if term < self.log.term() {
            return;
        }
        if term > self.log.term() || self.role != Role::Follower || self.leader != Some(from) {
            self.become_follower(now, term, Some(from));
        }
        self.last_leader_contact = Some(now);
        self.reset_election(now);
        let c = commit.min(self.leader_match);
        if c > self.commit {
            self.commit = c;
        }
    }

    /// A follower's acknowledgement carried by its coalesced heartbeat.
    pub fn on_heartbeat_ack(&mut self, now: u64, from: NodeId, term: u64, matched: u64) {
        if self.role != Role::Leader || term != self.log.term() {
            return;
        }
        if let Some(pr) = self.progress.get_mut(&from) {
            pr.last_ack = now;
            if matched < pr.matched {
                // The follower restarted and no longer knows what matches:
                // probe at the last point we know it holds.
                pr.next = pr.matched + 1;
                self.send_append(now, from);
            }
        }
    }

    pub fn step(&mut self, now: u64, from: NodeId, msg: RaftMsg) {
        if !self.members.contains(&from) {
            return;
        }
        let term = msg.term();
        match &msg {
            RaftMsg::PreVote { .. } | RaftMsg::PreVoteResp { .. } => {}
            RaftMsg::RequestVote { .. } if term > self.log.term() && self.leader_is_fresh(now) => {
                // A live leader is still heard from; ignore disruptive votes.
                return;
            }
            _ if term > self.log.term() => {
                let leader = matches!(msg, RaftMsg::Append { .. } | RaftMsg::Snapshot { .. }).then_some(from);
                self.become_follower(now, term, leader);
            }
            _ => {}
        }
        match msg {
            RaftMsg::PreVote { term, last_index, last_term } => {
                let granted = term > self.log.term() && !self.leader_is_fresh(now) && self.log_up_to_date(last_index, last_term);
                let current = self.log.term();
                self.send(from, RaftMsg::PreVoteResp { term, granted, current });
            }
            RaftMsg::PreVoteResp { term, granted, current } => {
                if current > self.log.term() {
                    self.become_follower(now, current, None);
                    return;
                }
                if self.role == Role::PreCandidate && term == self.log.term() + 1 && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.quorum() {
                        self.start_election(now);
                    }
                }
            }
            RaftMsg::RequestVote { term, last_index, last_term } => {
                let cur = self.log.term();
                let granted = term == cur
                    && self.log.vote().is_none_or(|v| v == from)
                    && self.log_up_to_date(last_index, last_term);
                if granted {
                    self.log.set_hard_state(cur, Some(from));
                    self.reset_election(now);
                }
                self.send(from, RaftMsg::Vote { term: cur, granted });
            }
            RaftMsg::Vote { term, granted } => {
                if self.role == Role::Candidate && term == self.log.term() && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.quorum() {
                        self.become_leader(now);
                    }
                }
            }
            RaftMsg::Append { term, prev_index, prev_term, entries, commit } => {
                let cur = self.log.term();
                if term < cur {
                    self.send(from, RaftMsg::AppendResp { term: cur, success: false, match_index: 0 });
                    return;
                }
                if self.role != Role::Follower || self.leader != Some(from) {
                    self.become_follower(now, term, Some(from));
                }
                self.last_leader_contact = Some(now);
                self.reset_election(now);
                self.handle_append(from, prev_index, prev_term, entries, commit);
            }
            RaftMsg::AppendResp { term, success, match_index } => {
                if self.role != Role::Leader || term != self.log.term() {
                    return;
                }
                let Some(pr) = self.progress.get_mut(&from) else { return };
                pr.last_ack = now;
                if success {
                    pr.matched = pr.matched.max(match_index);
                    pr.next = pr.next.max(pr.matched + 1);
                    self.advance_commit();
                    if self.progress[&from].matched < self.log.last_index() {
                        self.send_append(now, from);
                    }
                } else {
                    // match_index carries the follower's last index as a hint.
                    pr.next = (match_index + 1).min(pr.next.saturating_sub(1)).max(pr.matched + 1).max(1);
                    self.send_append(now, from);
                }
            }
            RaftMsg::Snapshot { term, meta, data } => {
                let cur = self.log.term();
                if term < cur {
                    return;
                }
                if self.role != Role::Follower || self.leader != Some(from) {
                    self.become_follower(now, term, Some(from));
                }
                self.last_leader_contact = Some(now);
                self.reset_election(now);
                if meta.index > self.commit {
                    self.log.install_snapshot(meta.clone(), data.clone());
                    self.commit = meta.index;
                    self.installed = Some((meta.clone(), data));
                }
                self.leader_match = self.leader_match.max(meta.index);
                self.send(from, RaftMsg::SnapshotResp { term: cur, index: meta.index.max(self.commit) });
            }
            RaftMsg::SnapshotResp { term, index } => {
                if self.role != Role::Leader || term != self.log.term() {
                    return;
                }
                if let Some(pr) = self.progress.get_mut(&from) {
                    pr.last_ack = now;
                    pr.matched = pr.matched.max(index);
                    pr.next = pr.matched + 1;
                }
                self.advance_commit();
                self.send_append(now, from);
            }
        }
    }

    fn handle_append(&mut self, from: NodeId, prev_index: u64, prev_term: u64, entries: Vec<Entry>, commit: u64) {
        let cur = self.log.term();
        if prev_index < self.log.snapshot_meta().index {
            // Already covered by our snapshot; skip what we have.
            let snap = self.log.snapshot_meta().index;
            let rest: Vec<Entry> = entries.into_iter().filter(|e| e.index > snap).collect();
            let st = self.log.term_at(snap).unwrap_or(0);
            return self.handle_append(from, snap, st, rest, commit);
        }
        if self.log.term_at(prev_index) != Some(prev_term) {
            let hint = self.log.last_index().min(prev_index.saturating_sub(1));
            self.send(from, RaftMsg::AppendResp { term: cur, success: false, match_index: hint });
            return;
        }
        let last_new = prev_index + entries.len() as u64;
        for e in entries {
            if !e.verify() {
                // Corrupt entry: accept the verified prefix only.
                let m = e.index - 1;
                self.leader_match = self.leader_match.max(m);
                self.send(from, RaftMsg::AppendResp { term: cur, success: true, match_index: m });
                return;
            }
            match self.log.term_at(e.index) {
                Some(t) if t == e.term => continue,
                Some(_) => {
                    debug_assert!(e.index > self.commit, "conflict below commit");
                    self.log.truncate_from(e.index);
                    self.log.append(e);
                }
                None => self.log.append(e),
            }
        }
        self.leader_match = self.leader_match.max(last_new);
        let c = commit.min(last_new);
        if c > self.commit {
            self.commit = c;
        }
        self.send(from, RaftMsg::AppendResp { term: cur, success: true, match_index: last_new });
    }

    /// Discards log entries through `index`, replacing them with a host
    /// snapshot of the state machine at that index.
    pub fn compact(&mut self, index: u64, data: Vec<u8>) {
        if let Some(term) = self.log.term_at(index) {
            if index <= self.commit {
                self.log.install_snapshot(SnapshotMeta { index, term }, data);
            }
        }
    }
}

#[cfg(test)]
mod tests;
