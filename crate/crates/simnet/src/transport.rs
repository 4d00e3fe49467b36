//! Client side of the simulator: calls and sleeps resolve against the
//! virtual clock.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll};

use cfs_core::client::{CallError, Transport};
use cfs_core::proto::{Message, Request, Response};
use cfs_core::types::{NodeId, Replica};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) struct Shared {
    pub now: u64,
    pub outbox: Vec<(u64, NodeId, Message)>,
    pub timers: Vec<(u64, u64)>,
    waiting: BTreeSet<(u64, u64)>,
    replies: BTreeMap<(u64, u64), Response>,
    next_rid: u64,
    rng: ChaCha8Rng,
}

impl Shared {
    pub fn new(seed: u64) -> Self {
        Self {
            now: 0,
            outbox: Vec::new(),
            timers: Vec::new(),
            waiting: BTreeSet::new(),
            replies: BTreeMap::new(),
            next_rid: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stores a reply; false when nobody waits for it any more.
    pub fn deliver(&mut self, client: u64, rid: u64, resp: Response) -> bool {
        if self.waiting.remove(&(client, rid)) {
            self.replies.insert((client, rid), resp);
            true
        } else {
            false
        }
    }

    pub fn finished(&mut self, client: u64) {
        self.waiting.retain(|(c, _)| *c != client);
        self.replies.retain(|(c, _), _| *c != client);
    }
}

#[derive(Clone)]
pub struct SimTransport {
    client: u64,
    shared: Rc<RefCell<Shared>>,
}

impl SimTransport {
    pub(crate) fn new(client: u64, shared: Rc<RefCell<Shared>>) -> Self {
        Self { client, shared }
    }

    pub fn client_id(&self) -> u64 {
        self.client
    }
}

struct CallFuture {
    key: (u64, u64),
    deadline: u64,
    shared: Rc<RefCell<Shared>>,
}

impl Future for CallFuture {
    type Output = Result<Response, CallError>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut s = self.shared.borrow_mut();
        if let Some(r) = s.replies.remove(&self.key) {
            return Poll::Ready(Ok(r));
        }
        if s.now >= self.deadline {
            s.waiting.remove(&self.key);
            return Poll::Ready(Err(CallError::Timeout));
        }
        Poll::Pending
    }
}

struct SleepFuture {
    until: u64,
    shared: Rc<RefCell<Shared>>,
}

impl Future for SleepFuture {
    type Output = ();

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.shared.borrow().now >= self.until {
            Poll::Ready(())
        } else {
            Poll::Pending
        }
    }
}

impl Transport for SimTransport {
    fn call(&self, to: &Replica, req: Request, timeout_ms: u64) -> impl Future<Output = Result<Response, CallError>> {
        let mut s = self.shared.borrow_mut();
        let rid = s.next_rid;
        s.next_rid += 1;
        let key = (self.client, rid);
        s.waiting.insert(key);
        s.outbox.push((self.client, to.node, Message::Request { rid, req }));
        let deadline = s.now + timeout_ms;
        s.timers.push((deadline, self.client));
        CallFuture { key, deadline, shared: self.shared.clone() }
    }

    fn sleep(&self, ms: u64) -> impl Future<Output = ()> {
        let mut s = self.shared.borrow_mut();
        let until = s.now + ms;
        if ms > 0 {
            s.timers.push((until, self.client));
        }
        SleepFuture { until, shared: self.shared.clone() }
    }

    fn now_ms(&self) -> u64 {
        self.shared.borrow().now
    }

    fn random(&self) -> u64 {
        self.shared.borrow_mut().rng.gen()
    }
}
