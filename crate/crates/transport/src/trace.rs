//! Run traces and their newline-delimited export.

use std::io::{self, Write};

use cbt_core::{Decision, DtRecord, Message, MessageKind, NodeId, Role, Tick, TxnId};
use serde::{Deserialize, Serialize};

/// The parts of a message a trace reader cares about (payload bytes of
/// replication traffic are left out).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsgSummary {
    pub id: u64,
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn: Option<TxnId>,
    pub from: NodeId,
    pub to: NodeId,
    pub term: u64,
}

impl MsgSummary {
    pub fn of(id: u64, m: &Message) -> Self {
        Self { id, kind: m.kind, txn: m.txn, from: m.from, to: m.to, term: m.term }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TraceEvent {
    /// `hop` is the node that put the message on the wire, `dst` where it
    /// goes next; they differ from `msg.from`/`msg.to` when relayed.
    Send { hop: NodeId, dst: NodeId, msg: MsgSummary },
    Deliver { dst: NodeId, msg: MsgSummary },
    Drop { dst: NodeId, msg: MsgSummary, reason: String },
    Crash { node: NodeId },
    Restart { node: NodeId },
    Submit { node: NodeId, txn: TxnId },
    LogAppend { node: NodeId, record: DtRecord },
    Decide { node: NodeId, txn: TxnId, decision: Decision },
    Truncate { node: NodeId, len: u64 },
    Election { node: NodeId, term: u64, role: Role },
    Violation { node: NodeId, txn: Option<TxnId>, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: Tick,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn push(&mut self, tick: Tick, event: TraceEvent) {
        self.entries.push(TraceEntry { tick, event });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter()
    }

    pub fn write_ndjson(&self, mut w: impl Write) -> io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_ndjson(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    /// Prefix of DT records appended by `node`, in order.
    pub fn records_of(&self, node: NodeId) -> Vec<DtRecord> {
        let mut out = Vec::new();
        for e in &self.entries {
            match &e.event {
                TraceEvent::LogAppend { node: n, record } if *n == node => out.push(*record),
                TraceEvent::Truncate { node: n, len } if *n == node => out.truncate(*len as usize),
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbt_core::RecordKind;

    #[test]
    fn ndjson_round_trip() {
        let mut t = Trace::default();
        let m = Message::for_txn(MessageKind::VoteRequest, TxnId(1), NodeId::new(0, 0), NodeId::new(1, 0), 1);
        t.push(0, TraceEvent::Send { hop: m.from, dst: m.to, msg: MsgSummary::of(0, &m) });
        t.push(
            1,
            TraceEvent::LogAppend {
                node: NodeId::new(1, 0),
                record: DtRecord { txn: TxnId(1), kind: RecordKind::VotedYes, term: 1, seq: 0 },
            },
        );
        let text = String::from_utf8(t.to_ndjson()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"tick\":0,\"event\":\"send\""));
        assert_eq!(Trace::from_ndjson(&text).unwrap(), t);
    }

    #[test]
    fn records_follow_truncation() {
        let n = NodeId::new(0, 1);
        let rec = |txn, kind, seq| DtRecord { txn: TxnId(txn), kind, term: 1, seq };
        let mut t = Trace::default();
        t.push(1, TraceEvent::LogAppend { node: n, record: rec(1, RecordKind::Start2PC, 0) });
        t.push(2, TraceEvent::LogAppend { node: n, record: rec(1, RecordKind::Abort, 1) });
        t.push(3, TraceEvent::Truncate { node: n, len: 1 });
        t.push(4, TraceEvent::LogAppend { node: n, record: rec(1, RecordKind::Commit, 2) });
        let kinds: Vec<_> = t.records_of(n).iter().map(|r| r.kind).collect();
        assert_eq!(kinds, vec![RecordKind::Start2PC, RecordKind::Commit]);
    }
}
