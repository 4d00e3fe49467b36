//! Data-partition replica: the primary-backup append chain and the two-phase
//! recovery of a restarted replica.

use std::collections::BTreeMap;

use super::Envelope;
use crate::extent::{DataPartition, ExtentImage, ExtentKind};
use crate::proto::{DataError, DataReply, Message, Response};
use crate::types::{Endpoint, ExtentId, ExtentKey, NodeId, PartitionId, PartitionStatus, ReadOnlyReason};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recovery {
    /// Aligning extents with a peer; nothing is served, log apply paused.
    Align { next_try: u64, attempt: usize },
    /// Catching up on the replicated log.
    CatchUp,
    Ready,
}

struct PendingAppend {
    to: Endpoint,
    rid: u64,
    key: ExtentKey,
    end: u64,
    deadline: u64,
}

pub struct DataState {
    pub part: DataPartition,
    pub recovery: Recovery,
    pending: BTreeMap<u64, PendingAppend>,
    next_seq: u64,
    /// Commit cursor history for monotonicity checks: highest committed
    /// offset ever reported per extent.
    pub cursor_violations: u64,
    high_water: BTreeMap<ExtentId, u64>,
}

impl DataState {
    pub fn new(part: DataPartition, recovering: bool) -> Self {
        let recovery = if recovering { Recovery::Align { next_try: 0, attempt: 0 } } else { Recovery::Ready };
        Self { part, recovery, pending: BTreeMap::new(), next_seq: 1, cursor_violations: 0, high_water: BTreeMap::new() }
    }

    pub fn restart(&mut self) {
        self.pending.clear();
        self.recovery = Recovery::Align { next_try: 0, attempt: 0 };
        if self.part.replicas.len() == 1 {
            self.recovery = Recovery::CatchUp;
        }
    }

    pub fn apply_paused(&self) -> bool {
        matches!(self.recovery, Recovery::Align { .. })
    }

    pub fn ready(&self) -> bool {
        self.recovery == Recovery::Ready
    }

    fn position(&self, me: NodeId) -> Option<usize> {
        self.part.replicas.iter().position(|&r| r == me)
    }

    fn note_commit(&mut self, eid: ExtentId) {
        if let Some(c) = self.part.committed(eid) {
            let hw = self.high_water.entry(eid).or_insert(0);
            if c < *hw {
                self.cursor_violations += 1;
            }
            *hw = (*hw).max(c);
        }
    }

    /// Client append at the head of the chain.
    #[allow(clippy::too_many_arguments)]
    pub fn append(
        &mut self,
        me: NodeId,
        now: u64,
        timeout: u64,
        from: Endpoint,
        rid: u64,
        extent: Option<ExtentId>,
        small: bool,
        data: Vec<u8>,
        out: &mut Vec<Envelope>,
    ) {
        let reply = |out: &mut Vec<Envelope>, r: Result<DataReply, DataError>| {
            out.push(Envelope { to: from, msg: Message::Response { rid, resp: Response::Data(r) } });
        };
        if self.position(me) != Some(0) {
            return reply(out, Err(DataError::NotPrimary));
        }
        if !self.ready() {
            return reply(out, Err(DataError::Recovering));
        }
        let res = if small { self.part.small_file_write(&data) } else { self.part.append(extent, &data) };
        let key = match res {
            Ok(k) => k,
            Err(e) => return reply(out, Err(e.into())),
        };
        let eid = key.extent_id;
        let end = key.extent_offset + key.size;
        if self.part.replicas.len() == 1 {
            let committed = self.part.commit(eid, end).unwrap_or(0);
            self.note_commit(eid);
            return reply(out, Ok(DataReply::Appended { key, committed }));
        }
        let kind = self.part.extent(eid).map_or(ExtentKind::Normal, |e| e.kind);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq, PendingAppend { to: from, rid, key, end, deadline: now + timeout });
        out.push(Envelope {
            to: Endpoint::Node(self.part.replicas[1]),
            msg: Message::PbForward { partition: self.part.id, extent: eid, kind, offset: key.extent_offset, data, seq },
        });
    }

    /// A packet forwarded down the chain.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        me: NodeId,
        from: NodeId,
        extent: ExtentId,
        kind: ExtentKind,
        offset: u64,
        data: Vec<u8>,
        seq: u64,
        out: &mut Vec<Envelope>,
    ) {
        let pid = self.part.id;
        let nack = |out: &mut Vec<Envelope>| {
            out.push(Envelope { to: Endpoint::Node(from), msg: Message::PbAck { partition: pid, extent, end: offset, seq, ok: false } });
        };
        let Some(pos) = self.position(me) else { return nack(out) };
        if pos == 0 || self.part.replicas[pos - 1] != from || self.apply_paused() {
            return nack(out);
        }
        let end = offset + data.len() as u64;
        if let Err(e) = self.part.replicate_write(extent, kind, offset, &data) {
            log::debug!("partition {pid}: forward at {offset} rejected: {e}");
            return nack(out);
        }
        if pos + 1 == self.part.replicas.len() {
            let _ = self.part.commit(extent, end);
            self.note_commit(extent);
            out.push(Envelope { to: Endpoint::Node(from), msg: Message::PbAck { partition: pid, extent, end, seq, ok: true } });
        } else {
            out.push(Envelope {
                to: Endpoint::Node(self.part.replicas[pos + 1]),
                msg: Message::PbForward { partition: pid, extent, kind, offset, data, seq },
            });
        }
    }

    /// An acknowledgement travelling back up the chain.
    pub fn ack(&mut self, me: NodeId, extent: ExtentId, end: u64, seq: u64, ok: bool, out: &mut Vec<Envelope>) {
        let Some(pos) = self.position(me) else { return };
        if ok {
            let _ = self.part.commit(extent, end);
            self.note_commit(extent);
        }
        if pos > 0 {
            let pid = self.part.id;
            out.push(Envelope { to: Endpoint::Node(self.part.replicas[pos - 1]), msg: Message::PbAck { partition: pid, extent, end, seq, ok } });
            return;
        }
        if ok {
            let committed = self.part.committed(extent).unwrap_or(0);
            let done: Vec<u64> =
                self.pending.iter().filter(|(_, p)| p.key.extent_id == extent && p.end <= committed).map(|(s, _)| *s).collect();
            for s in done {
                let p = self.pending.remove(&s).unwrap();
                let resp = Response::Data(Ok(DataReply::Appended { key: p.key, committed }));
                out.push(Envelope { to: p.to, msg: Message::Response { rid: p.rid, resp } });
            }
        } else if let Some(p) = self.pending.remove(&seq) {
            self.fail(p, out);
        }
    }

    fn fail(&mut self, p: PendingAppend, out: &mut Vec<Envelope>) {
        let committed = self.part.committed(p.key.extent_id).unwrap_or(0);
        if self.part.status.is_writable() {
            self.part.status = PartitionStatus::ReadOnly(ReadOnlyReason::ReplicaTimeout);
        }
        let err = DataError::ReplicaTimeout { extent: p.key.extent_id, offset: p.key.extent_offset, committed };
        out.push(Envelope { to: p.to, msg: Message::Response { rid: p.rid, resp: Response::Data(Err(err)) } });
    }

    /// Expires appends whose chain never acknowledged; drives recovery.
    pub fn tick(&mut self, me: NodeId, now: u64, retry_ms: u64, leader_known: bool, caught_up: bool, out: &mut Vec<Envelope>) {
        let expired: Vec<u64> = self.pending.iter().filter(|(_, p)| now >= p.deadline).map(|(s, _)| *s).collect();
        for s in expired {
            let p = self.pending.remove(&s).unwrap();
            self.fail(p, out);
        }
        match self.recovery {
            Recovery::Align { next_try, attempt } if now >= next_try => {
                let peers: Vec<NodeId> = self.part.replicas.iter().copied().filter(|&r| r != me).collect();
                if peers.is_empty() {
                    self.recovery = Recovery::CatchUp;
                    return;
                }
                let src = peers[attempt % peers.len()];
                let have = self.part.extent_states().into_iter().map(|s| (s.id, s.committed)).collect();
                out.push(Envelope { to: Endpoint::Node(src), msg: Message::AlignRequest { partition: self.part.id, have } });
                self.recovery = Recovery::Align { next_try: now + retry_ms, attempt: attempt + 1 };
            }
            Recovery::CatchUp if leader_known && caught_up => self.recovery = Recovery::Ready,
            _ => {}
        }
    }

    pub fn align_request(&self, have: &BTreeMap<ExtentId, u64>) -> Option<Vec<ExtentImage>> {
        self.part.export(have).ok()
    }

    pub fn align_response(&mut self, images: Option<Vec<ExtentImage>>) {
        if !self.apply_paused() {
            return;
        }
        let Some(images) = images else { return };
        match self.part.align(&images) {
            Ok(()) => {
                for img in &images {
                    self.note_commit(img.state.id);
                }
                self.recovery = Recovery::CatchUp;
            }
            Err(e) => log::warn!("partition {}: alignment failed: {e}", self.part.id),
        }
    }

    pub fn id(&self) -> PartitionId {
        self.part.id
    }
}
