//! The per-node distributed-transaction (DT) log.
//!
//! Append-only write-ahead records of every protocol step a node takes for a
//! transaction. After a crash the log is the only thing a node has left, so
//! [`DtLog::recover`] rebuilds per-transaction phases from it.
//!
//! On disk each record is framed as a 4-byte little-endian payload length,
//! a 25-byte payload (`txn` u64, `kind` u8, `term` u64, `seq` u64, all little
//! endian) and a 4-byte little-endian CRC32 of the payload. A torn or corrupt
//! tail is cut at the last valid record on open.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ChainId, Decision, NodeId, TxnId};

pub const PAYLOAD_LEN: usize = 25;
pub const FRAME_LEN: usize = 4 + PAYLOAD_LEN + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    Start2PC,
    VotedYes,
    Commit,
    Abort,
}

impl RecordKind {
    fn code(self) -> u8 {
        match self {
            RecordKind::Start2PC => 0,
            RecordKind::VotedYes => 1,
            RecordKind::Commit => 2,
            RecordKind::Abort => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => RecordKind::Start2PC,
            1 => RecordKind::VotedYes,
            2 => RecordKind::Commit,
            3 => RecordKind::Abort,
            _ => return None,
        })
    }

    pub fn decision(self) -> Option<Decision> {
        match self {
            RecordKind::Commit => Some(Decision::Commit),
            RecordKind::Abort => Some(Decision::Abort),
            _ => None,
        }
    }
}

impl From<Decision> for RecordKind {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Commit => RecordKind::Commit,
            Decision::Abort => RecordKind::Abort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DtRecord {
    pub txn: TxnId,
    pub kind: RecordKind,
    pub term: u64,
    pub seq: u64,
}

impl DtRecord {
    pub fn encode(&self) -> [u8; FRAME_LEN] {
        let mut frame = [0u8; FRAME_LEN];
        frame[0..4].copy_from_slice(&(PAYLOAD_LEN as u32).to_le_bytes());
        let payload = &mut frame[4..4 + PAYLOAD_LEN];
        payload[0..8].copy_from_slice(&self.txn.0.to_le_bytes());
        payload[8] = self.kind.code();
        payload[9..17].copy_from_slice(&self.term.to_le_bytes());
        payload[17..25].copy_from_slice(&self.seq.to_le_bytes());
        let crc = crc32fast::hash(&frame[4..4 + PAYLOAD_LEN]);
        frame[4 + PAYLOAD_LEN..].copy_from_slice(&crc.to_le_bytes());
        frame
    }

    /// Decodes one frame from the front of `bytes`, returning the record and
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(DtRecord, usize), FrameError> {
        if bytes.len() < 4 {
            return Err(FrameError::Truncated);
        }
        let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        if len != PAYLOAD_LEN {
            return Err(FrameError::BadLength(len));
        }
        if bytes.len() < FRAME_LEN {
            return Err(FrameError::Truncated);
        }
        let payload = &bytes[4..4 + PAYLOAD_LEN];
        let stored = u32::from_le_bytes(bytes[4 + PAYLOAD_LEN..FRAME_LEN].try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(FrameError::Checksum { stored, actual });
        }
        let kind = RecordKind::from_code(payload[8]).ok_or(FrameError::BadKind(payload[8]))?;
        let record = DtRecord {
            txn: TxnId(u64::from_le_bytes(payload[0..8].try_into().unwrap())),
            kind,
            term: u64::from_le_bytes(payload[9..17].try_into().unwrap()),
            seq: u64::from_le_bytes(payload[17..25].try_into().unwrap()),
        };
        Ok((record, FRAME_LEN))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame")]
    Truncated,
    #[error("unexpected payload length {0}")]
    BadLength(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")]
    Checksum { stored: u32, actual: u32 },
    #[error("unknown record kind {0}")]
    BadKind(u8),
}

#[derive(Debug, Error)]
pub enum DtLogError {
    #[error("log integrity violation for {txn}: {kind:?} conflicts with recorded {existing:?}")]
    Integrity {
        txn: TxnId,
        kind: RecordKind,
        existing: RecordKind,
    },
    #[error("I/O error on DT log: {0}")]
    Io(#[from] io::Error),
}

/// What the log says about one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecoveredPhase {
    /// Coordinator started the protocol but never logged a decision.
    Started,
    /// Participant voted YES and is still uncertain.
    VotedYes,
    Decided(Decision),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct TxnSummary {
    started: bool,
    voted: bool,
    decision: Option<Decision>,
}

impl TxnSummary {
    fn admit(&self, txn: TxnId, kind: RecordKind) -> Result<(), DtLogError> {
        let conflict = |existing| Err(DtLogError::Integrity { txn, kind, existing });
        if let Some(d) = self.decision {
            return conflict(RecordKind::from(d));
        }
        match kind {
            RecordKind::Start2PC if self.started => conflict(RecordKind::Start2PC),
            RecordKind::VotedYes if self.voted => conflict(RecordKind::VotedYes),
            _ => Ok(()),
        }
    }

    fn apply(&mut self, kind: RecordKind) {
        match kind {
            RecordKind::Start2PC => self.started = true,
            RecordKind::VotedYes => self.voted = true,
            RecordKind::Commit => self.decision = Some(Decision::Commit),
            RecordKind::Abort => self.decision = Some(Decision::Abort),
        }
    }

    fn phase(&self) -> Option<RecoveredPhase> {
        match (self.decision, self.voted, self.started) {
            (Some(d), _, _) => Some(RecoveredPhase::Decided(d)),
            (None, true, _) => Some(RecoveredPhase::VotedYes),
            (None, false, true) => Some(RecoveredPhase::Started),
            _ => None,
        }
    }
}

/// Conventional location of a node's log under `data_dir`.
pub fn log_path(data_dir: &Path, chain: ChainId, node: NodeId) -> PathBuf {
    data_dir
        .join(format!("chain{}", chain.0))
        .join(format!("node{}", node.node))
        .join("dt.log")
}

/// Result of opening a file-backed log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenReport {
    pub records: usize,
    /// Bytes cut from a torn or corrupt tail.
    pub truncated_bytes: u64,
}

#[derive(Debug, Default)]
pub struct DtLog {
    records: Vec<DtRecord>,
    txns: BTreeMap<TxnId, TxnSummary>,
    next_seq: u64,
    file: Option<File>,
}

impl DtLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file, keeping every record up to the first
    /// invalid frame. Anything after that is treated as a torn write.
    pub fn open(path: &Path) -> Result<(Self, OpenReport), DtLogError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(path)?.read_to_end(&mut bytes)?;
        }
        let mut log = DtLog::default();
        let mut offset = 0usize;
        while offset < bytes.len() {
            match DtRecord::decode(&bytes[offset..]) {
                Ok((record, used)) => {
                    let summary = log.txns.entry(record.txn).or_default();
                    if summary.admit(record.txn, record.kind).is_err() {
                        log::warn!("DT log {}: record {} violates txn invariants, cutting tail", path.display(), record.seq);
                        break;
                    }
                    summary.apply(record.kind);
                    log.next_seq = record.seq + 1;
                    log.records.push(record);
                    offset += used;
                }
                Err(e) => {
                    log::warn!("DT log {}: {} at byte {}, cutting tail", path.display(), e, offset);
                    break;
                }
            }
        }
        let truncated_bytes = (bytes.len() - offset) as u64;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if truncated_bytes > 0 {
            file.set_len(offset as u64)?;
            file.sync_data()?;
        }
        log.file = Some(file);
        let records = log.records.len();
        Ok((log, OpenReport { records, truncated_bytes }))
    }

    /// Rebuilds an in-memory log from already-decoded records, enforcing the
    /// same per-transaction rules as [`DtLog::append`].
    pub fn from_records(records: &[DtRecord]) -> Result<Self, DtLogError> {
        let mut log = DtLog::default();
        for r in records {
            log.txns.entry(r.txn).or_default().admit(r.txn, r.kind)?;
            log.txns.get_mut(&r.txn).unwrap().apply(r.kind);
            log.next_seq = r.seq + 1;
            log.records.push(*r);
        }
        Ok(log)
    }

    /// Whether `kind` may be appended for `txn`.
    pub fn check(&self, txn: TxnId, kind: RecordKind) -> Result<(), DtLogError> {
        self.txns.get(&txn).copied().unwrap_or_default().admit(txn, kind)
    }

    /// Appends a record and makes it durable before returning its sequence
    /// number. File-backed logs are synced; in-memory logs are durable by
    /// construction.
    pub fn append(&mut self, txn: TxnId, kind: RecordKind, term: u64) -> Result<u64, DtLogError> {
        self.check(txn, kind)?;
        let record = DtRecord {
            txn,
            kind,
            term,
            seq: self.next_seq,
        };
        if let Some(file) = self.file.as_mut() {
            file.write_all(&record.encode())?;
            file.sync_data()?;
        }
        self.txns.entry(txn).or_default().apply(kind);
        self.records.push(record);
        self.next_seq += 1;
        Ok(record.seq)
    }

    /// Drops every record from position `len` on. Only used when a rejoining
    /// node discards a suffix that its chain never made durable.
    pub fn truncate(&mut self, len: usize) -> Result<(), DtLogError> {
        if len >= self.records.len() {
            return Ok(());
        }
        self.records.truncate(len);
        self.txns.clear();
        for r in &self.records {
            self.txns.entry(r.txn).or_default().apply(r.kind);
        }
        if let Some(file) = self.file.as_mut() {
            file.set_len((len * FRAME_LEN) as u64)?;
            file.sync_data()?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[DtRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phase(&self, txn: TxnId) -> Option<RecoveredPhase> {
        self.txns.get(&txn).and_then(TxnSummary::phase)
    }

    pub fn decision(&self, txn: TxnId) -> Option<Decision> {
        self.txns.get(&txn).and_then(|s| s.decision)
    }

    /// Phases implied by the log as it stands, without writing anything.
    pub fn replay(&self) -> BTreeMap<TxnId, RecoveredPhase> {
        self.txns
            .iter()
            .filter_map(|(txn, s)| s.phase().map(|p| (*txn, p)))
            .collect()
    }

    /// Crash recovery. Transactions the coordinator started but never decided
    /// are aborted here (an abort record is appended), since a commit is
    /// always logged before any commit message leaves the node. Transactions
    /// left in `VotedYes` stay uncertain; the caller must run the recovery
    /// protocol for them.
    pub fn recover(&mut self, term: u64) -> Result<BTreeMap<TxnId, RecoveredPhase>, DtLogError> {
        let undecided: Vec<TxnId> = self
            .txns
            .iter()
            .filter(|(_, s)| s.started && !s.voted && s.decision.is_none())
            .map(|(t, _)| *t)
            .collect();
        for txn in undecided {
            self.append(txn, RecordKind::Abort, term)?;
        }
        Ok(self.replay())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: u64) -> TxnId {
        TxnId(n)
    }

    #[test]
    fn yes_then_commit_gets_sequential_seqs() {
        let mut log = DtLog::in_memory();
        assert_eq!(log.append(t(1), RecordKind::VotedYes, 1).unwrap(), 0);
        assert_eq!(log.append(t(1), RecordKind::Commit, 1).unwrap(), 1);
    }

    #[test]
    fn conflicting_decision_is_rejected() {
        let mut log = DtLog::in_memory();
        log.append(t(1), RecordKind::Commit, 1).unwrap();
        let err = log.append(t(1), RecordKind::Abort, 1).unwrap_err();
        assert!(matches!(err, DtLogError::Integrity { .. }));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn abort_without_history_is_accepted() {
        let mut log = DtLog::in_memory();
        log.append(t(2), RecordKind::Abort, 1).unwrap();
        assert_eq!(log.phase(t(2)), Some(RecoveredPhase::Decided(Decision::Abort)));
    }

    #[test]
    fn yes_after_decision_is_rejected() {
        let mut log = DtLog::in_memory();
        log.append(t(3), RecordKind::Abort, 1).unwrap();
        assert!(log.append(t(3), RecordKind::VotedYes, 1).is_err());
    }

    #[test]
    fn recover_cases() {
        let mut log = DtLog::in_memory();
        log.append(t(1), RecordKind::VotedYes, 1).unwrap();
        log.append(t(2), RecordKind::VotedYes, 1).unwrap();
        log.append(t(2), RecordKind::Commit, 1).unwrap();
        log.append(t(3), RecordKind::Start2PC, 1).unwrap();
        let phases = log.recover(2).unwrap();
        assert_eq!(phases[&t(1)], RecoveredPhase::VotedYes);
        assert_eq!(phases[&t(2)], RecoveredPhase::Decided(Decision::Commit));
        assert_eq!(phases[&t(3)], RecoveredPhase::Decided(Decision::Abort));
        let last = log.records().last().unwrap();
        assert_eq!((last.txn, last.kind, last.term), (t(3), RecordKind::Abort, 2));
    }

    #[test]
    fn recover_empty_log_is_empty() {
        assert!(DtLog::in_memory().recover(1).unwrap().is_empty());
    }

    #[test]
    fn frame_layout_is_exact() {
        let r = DtRecord {
            txn: TxnId(0x0102),
            kind: RecordKind::Commit,
            term: 7,
            seq: 9,
        };
        let f = r.encode();
        assert_eq!(f.len(), 33);
        assert_eq!(&f[0..4], &[25, 0, 0, 0]);
        assert_eq!(&f[4..12], &[2, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(f[12], 2);
        assert_eq!(&f[13..21], &7u64.to_le_bytes());
        assert_eq!(&f[21..29], &9u64.to_le_bytes());
        assert_eq!(&f[29..33], &crc32fast::hash(&f[4..29]).to_le_bytes());
        assert_eq!(DtRecord::decode(&f).unwrap(), (r, 33));
    }

    #[test]
    fn corrupt_frames_are_detected() {
        let r = DtRecord {
            txn: TxnId(5),
            kind: RecordKind::VotedYes,
            term: 1,
            seq: 0,
        };
        let mut f = r.encode();
        f[10] ^= 0xff;
        assert!(matches!(DtRecord::decode(&f), Err(FrameError::Checksum { .. })));
        assert_eq!(DtRecord::decode(&f[..20]), Err(FrameError::Truncated));
    }

    #[test]
    fn file_log_survives_reopen_and_cuts_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = log_path(dir.path(), ChainId(1), NodeId::new(1, 0));
        {
            let (mut log, report) = DtLog::open(&path).unwrap();
            assert_eq!(report.records, 0);
            log.append(t(1), RecordKind::VotedYes, 1).unwrap();
            log.append(t(1), RecordKind::Commit, 1).unwrap();
            log.append(t(2), RecordKind::VotedYes, 1).unwrap();
        }
        // simulate a torn write of a fourth record
        let partial = DtRecord {
            txn: t(2),
            kind: RecordKind::Commit,
            term: 1,
            seq: 3,
        }
        .encode();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&partial[..17]).unwrap();
        drop(f);

        let (mut log, report) = DtLog::open(&path).unwrap();
        assert_eq!(report, OpenReport { records: 3, truncated_bytes: 17 });
        assert_eq!(log.phase(t(2)), Some(RecoveredPhase::VotedYes));
        assert_eq!(log.append(t(2), RecordKind::Abort, 2).unwrap(), 3);
        drop(log);
        let (log, report) = DtLog::open(&path).unwrap();
        assert_eq!(report.truncated_bytes, 0);
        assert_eq!(log.decision(t(2)), Some(Decision::Abort));
        assert!(path.ends_with("chain1/node0/dt.log"));
    }

    #[test]
    fn truncate_rebuilds_summaries() {
        let mut log = DtLog::in_memory();
        log.append(t(1), RecordKind::VotedYes, 1).unwrap();
        log.append(t(1), RecordKind::Abort, 1).unwrap();
        log.truncate(1).unwrap();
        assert_eq!(log.phase(t(1)), Some(RecoveredPhase::VotedYes));
        log.append(t(1), RecordKind::Commit, 2).unwrap();
        // seq keeps growing past the discarded record
        assert_eq!(log.records()[1].seq, 2);
    }
}
