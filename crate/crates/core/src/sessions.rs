//! Exactly-once application of client requests carried through a
//! replicated log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::proto::Response;
use crate::types::Session;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct ClientTable {
    /// Requests at or below this sequence number that were not applied
    /// never will be.
    fence: u64,
    done: BTreeMap<u64, Response>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sessions {
    clients: BTreeMap<u64, ClientTable>,
}

pub enum Check {
    Fresh,
    Cached(Response),
    Fenced,
}

impl Sessions {
    pub fn check(&mut self, s: Session, ack_below: u64) -> Check {
        let t = self.clients.entry(s.client).or_default();
        if ack_below > 0 {
            t.done = t.done.split_off(&ack_below);
        }
        if let Some(r) = t.done.get(&s.seq) {
            return Check::Cached(r.clone());
        }
        if s.seq <= t.fence {
            return Check::Fenced;
        }
        Check::Fresh
    }

    /// Like [`Sessions::check`] but without pruning, for a leader deciding
    /// whether a request needs proposing at all.
    pub fn peek(&self, s: Session) -> Check {
        match self.clients.get(&s.client) {
            Some(t) => match t.done.get(&s.seq) {
                Some(r) => Check::Cached(r.clone()),
                None if s.seq <= t.fence => Check::Fenced,
                None => Check::Fresh,
            },
            None => Check::Fresh,
        }
    }

    pub fn record(&mut self, s: Session, r: &Response) {
        self.clients.entry(s.client).or_default().done.insert(s.seq, r.clone());
    }

    /// The cached reply for `s`, or `None` after fencing `s` off.
    pub fn resolve(&mut self, s: Session) -> Option<Response> {
        let t = self.clients.entry(s.client).or_default();
        match t.done.get(&s.seq) {
            Some(r) => Some(r.clone()),
            None => {
                t.fence = t.fence.max(s.seq);
                None
            }
        }
    }

    /// Cached replies, for census attribution of unresolved creates.
    pub fn reply(&self, s: Session) -> Option<&Response> {
        self.clients.get(&s.client).and_then(|t| t.done.get(&s.seq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::MetaReply;

    fn s(seq: u64) -> Session {
        Session { client: 5, seq }
    }

    #[test]
    fn dedupe_fence_and_prune() {
        let mut t = Sessions::default();
        let r = Response::Meta(Ok(MetaReply::Nlink(1)));
        assert!(matches!(t.check(s(1), 0), Check::Fresh));
        t.record(s(1), &r);
        assert!(matches!(t.check(s(1), 0), Check::Cached(x) if x == r));
        assert_eq!(t.resolve(s(1)), Some(r.clone()));
        assert_eq!(t.resolve(s(3)), None);
        assert!(matches!(t.check(s(2), 0), Check::Fenced));
        assert!(matches!(t.check(s(3), 0), Check::Fenced));
        assert!(matches!(t.check(s(4), 2), Check::Fresh));
        assert!(t.reply(s(1)).is_none(), "pruned below ack_below");
    }
}
