//! The event loop: a virtual clock, a seeded network and the node and
//! client tasks it connects.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll};

use cfs_core::node::{NodeConfig, ServerNode};
use cfs_core::proto::{Message, NodeSpec};
use cfs_core::types::{Endpoint, NodeId, NodeKind, Replica};
use cfs_core::wire;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::script::{FaultAction, FaultScript};
use crate::transport::{Shared, SimTransport};

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    /// Inclusive one-way message latency range in virtual ms.
    pub latency: (u64, u64),
    pub tick_ms: u64,
    /// Push every message through the binary frame codec.
    pub wire_frames: bool,
    pub node: NodeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { seed: 1, latency: (1, 5), tick_ms: 20, wire_frames: true, node: NodeConfig::default() }
    }
}

/// A message predicate used to drop or count specific traffic.
pub type Filter = Box<dyn FnMut(Endpoint, Endpoint, &Message) -> bool>;

enum Event {
    Deliver { from: Endpoint, to: Endpoint, msg: Message },
    Tick,
    Wake(u64),
    Fault(FaultAction),
}

struct Queued {
    at: u64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

struct Slot {
    node: ServerNode,
    up: bool,
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

/// Message counters, by wire type name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub sent: BTreeMap<&'static str, u64>,
    pub dropped: u64,
    pub duplicated: u64,
    pub bytes: u64,
}

pub struct Sim {
    pub cfg: SimConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
    nodes: BTreeMap<NodeId, Slot>,
    topology: Vec<NodeSpec>,
    shared: Rc<RefCell<Shared>>,
    tasks: BTreeMap<u64, Task>,
    next_client: u64,
    rng: ChaCha8Rng,
    cut: BTreeSet<(NodeId, NodeId)>,
    drop_next: u64,
    dup_next: u64,
    /// Latest delivery time per directed link; links are FIFO like TCP.
    link_clock: BTreeMap<(Endpoint, Endpoint), u64>,
    drop_filter: Option<Filter>,
    pub counters: Counters,
    /// Per-message observer, called for every send.
    observer: Option<Filter>,
    /// Faults applied so far, as (time, text).
    pub fault_log: Vec<(u64, String)>,
}

impl Sim {
    pub fn new(topology: &[NodeSpec], cfg: SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut nodes = BTreeMap::new();
        for spec in topology {
            let node = ServerNode::new(spec.clone(), topology, cfg.node.clone(), None, 0, rng.gen());
            nodes.insert(spec.id, Slot { node, up: true });
        }
        let shared = Rc::new(RefCell::new(Shared::new(rng.gen())));
        let mut sim = Self {
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            topology: topology.to_vec(),
            shared,
            tasks: BTreeMap::new(),
            next_client: 1,
            rng,
            cut: BTreeSet::new(),
            drop_next: 0,
            dup_next: 0,
            link_clock: BTreeMap::new(),
            drop_filter: None,
            counters: Counters::default(),
            observer: None,
            fault_log: Vec::new(),
        };
        sim.push(sim.cfg.tick_ms, Event::Tick);
        sim
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn topology(&self) -> &[NodeSpec] {
        &self.topology
    }

    pub fn managers(&self) -> Vec<Replica> {
        self.topology
            .iter()
            .filter(|n| n.kind == NodeKind::Manager)
            .map(|n| Replica { node: n.id, addr: n.addr.clone() })
            .collect()
    }

    fn push(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq: self.seq, ev }));
    }

    pub fn node(&self, id: NodeId) -> &ServerNode {
        &self.nodes[&id].node
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut ServerNode {
        &mut self.nodes.get_mut(&id).expect("unknown node").node
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &ServerNode)> {
        self.nodes.iter().map(|(id, s)| (id, &s.node))
    }

    pub fn is_up(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|s| s.up)
    }

    /// Adds a node while the cluster runs (it still has to be registered
    /// with the manager).
    pub fn add_node(&mut self, spec: NodeSpec) {
        let node = ServerNode::new(spec.clone(), &self.topology, self.cfg.node.clone(), None, self.now, self.rng.gen());
        self.nodes.insert(spec.id, Slot { node, up: true });
        self.topology.push(spec);
    }

    pub fn crash(&mut self, id: NodeId) {
        if let Some(s) = self.nodes.get_mut(&id) {
            s.up = false;
        }
    }

    pub fn restart(&mut self, id: NodeId) {
        let now = self.now;
        if let Some(s) = self.nodes.get_mut(&id) {
            s.node.restart(now);
            s.up = true;
        }
    }

    /// Cuts the link between two nodes in both directions.
    pub fn partition_link(&mut self, a: NodeId, b: NodeId) {
        self.cut.insert((a.min(b), a.max(b)));
    }

    pub fn heal_link(&mut self, a: NodeId, b: NodeId) {
        self.cut.remove(&(a.min(b), a.max(b)));
    }

    pub fn isolate(&mut self, id: NodeId) {
        let others: Vec<NodeId> = self.nodes.keys().copied().filter(|n| *n != id).collect();
        for o in others {
            self.partition_link(id, o);
        }
    }

    pub fn heal_all(&mut self) {
        self.cut.clear();
    }

    pub fn drop_next(&mut self, n: u64) {
        self.drop_next += n;
    }

    pub fn duplicate_next(&mut self, n: u64) {
        self.dup_next += n;
    }

    pub fn set_latency(&mut self, lo: u64, hi: u64) {
        self.cfg.latency = (lo, hi.max(lo));
    }

    /// Drops every message the filter accepts, until cleared.
    pub fn set_drop_filter(&mut self, f: Option<Filter>) {
        self.drop_filter = f;
    }

    pub fn set_observer(&mut self, f: Option<Filter>) {
        self.observer = f;
    }

    pub fn schedule(&mut self, script: &FaultScript) {
        for d in &script.directives {
            self.push(d.at, Event::Fault(d.action.clone()));
        }
    }

    fn apply_fault(&mut self, a: FaultAction) {
        self.fault_log.push((self.now, a.to_string()));
        match a {
            FaultAction::Crash(n) => self.crash(n),
            FaultAction::Restart(n) => self.restart(n),
            FaultAction::Partition(a, b) => self.partition_link(a, b),
            FaultAction::Heal(a, b) => self.heal_link(a, b),
            FaultAction::Isolate(n) => self.isolate(n),
            FaultAction::HealAll => self.heal_all(),
            FaultAction::DropNext(n) => self.drop_next(n),
            FaultAction::DuplicateNext(n) => self.duplicate_next(n),
            FaultAction::Delay(lo, hi) => self.set_latency(lo, hi),
        }
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, msg: Message) {
        let name = wire::type_name(msg.msg_type());
        *self.counters.sent.entry(name).or_default() += 1;
        if let Some(obs) = &mut self.observer {
            obs(from, to, &msg);
        }
        if let (Endpoint::Node(a), Endpoint::Node(b)) = (from, to) {
            if self.cut.contains(&(a.min(b), a.max(b))) {
                self.counters.dropped += 1;
                return;
            }
        }
        if self.drop_next > 0 {
            self.drop_next -= 1;
            self.counters.dropped += 1;
            return;
        }
        if let Some(f) = &mut self.drop_filter {
            if f(from, to, &msg) {
                self.counters.dropped += 1;
                return;
            }
        }
        let msg = if self.cfg.wire_frames {
            let frame = wire::encode(&msg);
            self.counters.bytes += frame.len() as u64;
            wire::decode(&frame).expect("frame round trip")
        } else {
            msg
        };
        let (lo, hi) = self.cfg.latency;
        if self.dup_next > 0 {
            self.dup_next -= 1;
            self.counters.duplicated += 1;
            let at = self.now + self.rng.gen_range(lo..=hi);
            self.push(at, Event::Deliver { from, to, msg: msg.clone() });
        }
        let last = self.link_clock.entry((from, to)).or_insert(0);
        let at = (self.now + self.rng.gen_range(lo..=hi)).max(*last);
        *last = at;
        self.push(at, Event::Deliver { from, to, msg });
    }

    fn flush_clients(&mut self) {
        let out = std::mem::take(&mut self.shared.borrow_mut().outbox);
        for (from, to, msg) in out {
            self.send(Endpoint::Client(from), Endpoint::Node(to), msg);
        }
        let timers = std::mem::take(&mut self.shared.borrow_mut().timers);
        for (at, c) in timers {
            self.push(at, Event::Wake(c));
        }
    }

    fn poll_task(&mut self, c: u64) {
        let Some(mut task) = self.tasks.remove(&c) else { return };
        self.shared.borrow_mut().now = self.now;
        let waker = futures::task::noop_waker();
        let mut cx = Context::from_waker(&waker);
        if task.as_mut().poll(&mut cx) == Poll::Pending {
            self.tasks.insert(c, task);
        } else {
            self.shared.borrow_mut().finished(c);
        }
        self.flush_clients();
    }

    /// Starts a client task; it gets its own transport and client id.
    pub fn spawn<F, Fut>(&mut self, f: F) -> u64
    where
        F: FnOnce(SimTransport) -> Fut,
        Fut: Future<Output = ()> + 'static,
    {
        let c = self.next_client;
        self.next_client += 1;
        let t = SimTransport::new(c, self.shared.clone());
        self.tasks.insert(c, Box::pin(f(t)));
        self.poll_task(c);
        c
    }

    pub fn tasks_running(&self) -> usize {
        self.tasks.len()
    }

    /// Processes one event. Returns false when nothing is queued.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(q)) = self.queue.pop() else { return false };
        self.now = q.at;
        self.shared.borrow_mut().now = self.now;
        match q.ev {
            Event::Deliver { from, to: Endpoint::Node(n), msg } => {
                let now = self.now;
                let out = match self.nodes.get_mut(&n) {
                    Some(s) if s.up => s.node.handle(now, from, msg),
                    _ => Vec::new(),
                };
                for e in out {
                    self.send(Endpoint::Node(n), e.to, e.msg);
                }
            }
            Event::Deliver { to: Endpoint::Client(c), msg, .. } => {
                if let Message::Response { rid, resp } = msg {
                    if self.shared.borrow_mut().deliver(c, rid, resp) {
                        self.poll_task(c);
                    }
                }
            }
            Event::Tick => {
                let now = self.now;
                let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
                for id in ids {
                    let s = self.nodes.get_mut(&id).unwrap();
                    if !s.up {
                        continue;
                    }
                    let out = s.node.tick(now);
                    for e in out {
                        self.send(Endpoint::Node(id), e.to, e.msg);
                    }
                }
                self.push(now + self.cfg.tick_ms, Event::Tick);
            }
            Event::Wake(c) => self.poll_task(c),
            Event::Fault(a) => self.apply_fault(a),
        }
        true
    }

    /// Runs until virtual time reaches `t`.
    pub fn run_until_time(&mut self, t: u64) {
        while self.queue.peek().is_some_and(|Reverse(q)| q.at <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, ms: u64) {
        let t = self.now + ms;
        self.run_until_time(t);
    }

    /// Runs until `done` holds or `limit_ms` of virtual time passes.
    pub fn run_until(&mut self, limit_ms: u64, mut done: impl FnMut(&Sim) -> bool) -> bool {
        let end = self.now + limit_ms;
        while !done(self) {
            if self.now >= end || !self.step() {
                return done(self);
            }
        }
        true
    }

    /// Runs a client future to completion and returns its output.
    pub fn block_on<F, Fut, R>(&mut self, limit_ms: u64, f: F) -> Option<R>
    where
        F: FnOnce(SimTransport) -> Fut,
        Fut: Future<Output = R> + 'static,
        R: 'static,
    {
        let slot = Rc::new(RefCell::new(None));
        let s2 = slot.clone();
        let c = self.spawn(move |t| {
            let fut = f(t);
            async move {
                let r = fut.await;
                *s2.borrow_mut() = Some(r);
            }
        });
        self.run_until(limit_ms, |sim| !sim.tasks.contains_key(&c));
        self.tasks.remove(&c);
        let r = slot.borrow_mut().take();
        r
    }

    /// Runs until every spawned task finished or the limit passes.
    pub fn run_tasks(&mut self, limit_ms: u64) -> bool {
        self.run_until(limit_ms, |sim| sim.tasks.is_empty())
    }

    /// Leader of a group as seen by the nodes themselves.
    pub fn leader_of(&self, gid: u64) -> Option<NodeId> {
        self.nodes.iter().filter(|(_, s)| s.up).find(|(_, s)| s.node.is_leader(gid)).map(|(id, _)| *id)
    }

    pub fn manager_leader(&self) -> Option<NodeId> {
        self.leader_of(cfs_core::types::MANAGER_GROUP)
    }
}
