use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Minimal cluster driver: unit latency, random loss, crash/restart and
/// coalesced heartbeats every 100 ms.
struct Cluster {
    now: u64,
    nodes: BTreeMap<NodeId, RaftCore>,
    up: BTreeMap<NodeId, bool>,
    inflight: Vec<(u64, NodeId, NodeId, RaftMsg)>,
    rng: ChaCha8Rng,
    loss: f64,
    /// Commands committed anywhere, by index.
    committed: BTreeMap<u64, Vec<u8>>,
    leaders_by_term: BTreeMap<u64, NodeId>,
}

impl Cluster {
    fn new(n: u32, seed: u64) -> Self {
        let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        let nodes = ids
            .iter()
            .map(|&id| (id, RaftCore::new(9, id, ids.clone(), LogStore::memory(), RaftConfig::default(), 0, seed)))
            .collect();
        let up = ids.iter().map(|&id| (id, true)).collect();
        Self {
            now: 0,
            nodes,
            up,
            inflight: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss: 0.0,
            committed: BTreeMap::new(),
            leaders_by_term: BTreeMap::new(),
        }
    }

    fn flush(&mut self, id: NodeId) {
        let msgs = self.nodes.get_mut(&id).unwrap().take_messages();
        for (to, m) in msgs {
            let lat = self.rng.gen_range(1..=5);
            self.inflight.push((self.now + lat, id, to, m));
        }
    }

    fn step_ms(&mut self) {
        self.now += 1;
        let now = self.now;
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.inflight).into_iter().partition(|m| m.0 <= now);
        self.inflight = rest;
        for (_, from, to, m) in due {
            if !self.up[&to] || !self.up[&from] || self.rng.gen_bool(self.loss) {
                continue;
            }
            self.nodes.get_mut(&to).unwrap().step(now, from, m);
            self.flush(to);
        }
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        if now % 20 == 0 {
            for &id in &ids {
                if self.up[&id] {
                    self.nodes.get_mut(&id).unwrap().tick(now);
                    self.flush(id);
                }
            }
        }
        if now % 100 == 0 {
            // coalesced heartbeats, delivered instantly for simplicity
            for &a in &ids {
                for &b in &ids {
                    if a == b || !self.up[&a] || !self.up[&b] || self.rng.gen_bool(self.loss) {
                        continue;
                    }
                    if let Some((t, c)) = self.nodes[&a].heartbeat_entry() {
                        self.nodes.get_mut(&b).unwrap().on_heartbeat(now, a, t, c);
                    }
                    if let Some((l, t, m)) = self.nodes[&a].follower_entry() {
                        if l == b {
                            self.nodes.get_mut(&b).unwrap().on_heartbeat_ack(now, a, t, m);
                        }
                    }
                    self.flush(b);
                }
            }
        }
        self.check();
    }

    fn check(&mut self) {
        for (id, n) in &self.nodes {
            if n.is_leader() {
                let prev = self.leaders_by_term.insert(n.term(), *id);
                assert!(prev.is_none() || prev == Some(*id), "two leaders in term {}", n.term());
            }
            for i in n.log().first_index()..=n.commit_index() {
                let e = n.entry(i).expect("committed entry retained");
                match self.committed.get(&i) {
                    Some(d) => assert_eq!(d, &e.data, "committed entry {i} differs on {id}"),
                    None => {
                        self.committed.insert(i, e.data.clone());
                    }
                }
            }
        }
    }

    fn leader(&self) -> Option<NodeId> {
        self.nodes.iter().find(|(id, n)| self.up[id] && n.is_leader()).map(|(id, _)| *id)
    }

    fn run(&mut self, ms: u64) {
        for _ in 0..ms {
            self.step_ms();
        }
    }

    fn crash(&mut self, id: NodeId) {
        self.up.insert(id, false);
    }

    fn restart(&mut self, id: NodeId) {
        self.up.insert(id, true);
        let now = self.now;
        self.nodes.get_mut(&id).unwrap().restart(now);
    }
}

#[test]
fn elects_a_single_leader() {
    let mut c = Cluster::new(3, 1);
    c.run(2000);
    let l = c.leader().expect("leader elected");
    let n = &c.nodes[&l];
    assert!(n.commit_index() >= 1);
    assert!(n.can_read(c.now));
}

#[test]
fn campaign_elects_immediately() {
    let mut c = Cluster::new(3, 2);
    c.nodes.get_mut(&NodeId(1)).unwrap().campaign(0);
    c.flush(NodeId(1));
    c.run(30);
    assert_eq!(c.leader(), Some(NodeId(1)));
}

#[test]
fn proposals_commit_everywhere() {
    let mut c = Cluster::new(3, 3);
    c.run(1500);
    let l = c.leader().unwrap();
    for i in 0..20u8 {
        let now = c.now;
        c.nodes.get_mut(&l).unwrap().propose(now, vec![i]).unwrap();
        c.flush(l);
        c.run(7);
    }
    c.run(500);
    let last = c.nodes[&l].last_index();
    for n in c.nodes.values() {
        assert_eq!(n.commit_index(), last);
    }
}

#[test]
fn follower_rejects_proposals() {
    let mut c = Cluster::new(3, 4);
    c.run(1500);
    let l = c.leader().unwrap();
    let f = c.nodes.keys().copied().find(|&n| n != l).unwrap();
    assert!(c.nodes.get_mut(&f).unwrap().propose(c.now, vec![1]).is_none());
    assert_eq!(c.nodes[&f].leader(), Some(l));
}

#[test]
fn leader_crash_fails_over_and_keeps_committed() {
    let mut c = Cluster::new(3, 5);
    c.run(1500);
    let l = c.leader().unwrap();
    for i in 0..5u8 {
        let now = c.now;
        c.nodes.get_mut(&l).unwrap().propose(now, vec![i]).unwrap();
        c.flush(l);
    }
    c.run(100);
    let committed = c.nodes[&l].commit_index();
    c.crash(l);
    c.run(2500);
    let l2 = c.leader().expect("new leader");
    assert_ne!(l, l2);
    assert!(c.nodes[&l2].commit_index() >= committed);
    c.restart(l);
    c.run(1500);
    assert_eq!(c.nodes[&l].commit_index(), c.nodes[&l2].commit_index());
}

#[test]
fn isolated_node_does_not_disrupt_on_return() {
    let mut c = Cluster::new(3, 6);
    c.run(1500);
    let l = c.leader().unwrap();
    let term = c.nodes[&l].term();
    let f = c.nodes.keys().copied().find(|&n| n != l).unwrap();
    c.crash(f);
    c.run(5000);
    c.up.insert(f, true);
    c.run(2000);
    assert_eq!(c.leader(), Some(l));
    assert_eq!(c.nodes[&l].term(), term);
}

#[test]
fn leader_steps_down_without_quorum() {
    let mut c = Cluster::new(3, 7);
    c.run(1500);
    let l = c.leader().unwrap();
    for id in c.nodes.keys().copied().collect::<Vec<_>>() {
        if id != l {
            c.crash(id);
        }
    }
    c.run(1500);
    assert!(!c.nodes[&l].is_leader());
    assert!(!c.nodes[&l].can_read(c.now));
}

#[test]
fn snapshot_catches_up_lagging_follower() {
    let mut c = Cluster::new(3, 8);
    c.run(1500);
    let l = c.leader().unwrap();
    let f = c.nodes.keys().copied().find(|&n| n != l).unwrap();
    c.crash(f);
    for i in 0..50u8 {
        let now = c.now;
        c.nodes.get_mut(&l).unwrap().propose(now, vec![i]).unwrap();
        c.flush(l);
        c.run(3);
    }
    c.run(200);
    let ci = c.nodes[&l].commit_index();
    c.nodes.get_mut(&l).unwrap().compact(ci, b"state".to_vec());
    c.restart(f);
    c.run(1500);
    let fol = c.nodes.get_mut(&f).unwrap();
    let (meta, data) = fol.take_installed_snapshot().expect("snapshot shipped");
    assert_eq!(meta.index, ci);
    assert_eq!(data, b"state");
    assert!(fol.commit_index() >= ci);
}

/// Small-model safety runs: random loss plus up to six crash/restart
/// events on three replicas; committed prefixes must never diverge (checked
/// every millisecond by `Cluster::check`).
#[test]
fn randomized_crash_safety() {
    for seed in 0..40 {
        let mut c = Cluster::new(3, 100 + seed);
        c.loss = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events = 0;
        let mut down: Option<NodeId> = None;
        for step in 0..60 {
            c.run(100);
            if let Some(l) = c.leader() {
                let now = c.now;
                c.nodes.get_mut(&l).unwrap().propose(now, vec![seed as u8, step as u8]).unwrap();
                c.flush(l);
            }
            if events < 6 && rng.gen_bool(0.15) {
                events += 1;
                match down.take() {
                    Some(d) => c.restart(d),
                    None => {
                        let victim = NodeId(rng.gen_range(1..=3));
                        c.crash(victim);
                        down = Some(victim);
                    }
                }
            }
        }
        if let Some(d) = down {
            c.restart(d);
        }
        c.loss = 0.0;
        c.run(4000);
        let l = c.leader().expect("leader after healing");
        let li = c.nodes[&l].commit_index();
        for n in c.nodes.values() {
            assert_eq!(n.commit_index(), li, "seed {seed}");
        }
    }
}
